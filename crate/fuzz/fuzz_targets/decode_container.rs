#![no_main]

use libfuzzer_sys::fuzz_target;
use smyrf::container::{decode_container, encode_container, encode_output, Container};

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    match decode_container(data) {
        Ok(Container::Qkv(inst)) => assert_eq!(encode_container(&inst).unwrap(), data),
        Ok(Container::Output(m)) => assert_eq!(encode_output(&m).unwrap(), data),
        Err(_) => {}
    }
});
