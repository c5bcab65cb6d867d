#![no_main]

use dynexit::harness::tokenize::{detokenize, tokenize, BOS, VOCAB_SIZE};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    match tokenize(data) {
        Ok(ids) => {
            assert_eq!(ids[0], BOS);
            assert!(ids.iter().all(|&t| t < VOCAB_SIZE));
            assert_eq!(detokenize(&ids).unwrap(), data);
        }
        Err(_) => assert!(data.is_empty()),
    }
});
