#![no_main]

use dynexit::harness::report::{parse_csv, render_svg, to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(records) = parse_csv(data) {
        let text = to_csv(&records).unwrap();
        let again = parse_csv(&text).unwrap();
        assert_eq!(again.len(), records.len());
        let _ = render_svg(&records, "fuzz");
    }
});
