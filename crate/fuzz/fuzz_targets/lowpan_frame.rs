#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    objsec_core::fuzz_targets::lowpan_frame(data);
});
