#![no_main]

use libfuzzer_sys::fuzz_target;
use smyrf::report::parse_report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(doc) = parse_report(text) {
        let again = parse_report(&doc.to_toml().unwrap()).unwrap();
        if doc == again {
            return;
        }
        // NaN fields compare unequal to themselves; compare the text instead.
        assert_eq!(doc.to_toml().unwrap(), again.to_toml().unwrap());
    }
});
