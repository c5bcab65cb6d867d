#![no_main]

use dynexit::harness::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = RunConfig::parse(data) {
        let again = RunConfig::parse(&cfg.to_kv()).expect("rendered config parses");
        assert_eq!(again.to_kv(), cfg.to_kv());
    }
});
