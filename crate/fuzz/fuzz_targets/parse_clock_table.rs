#![no_main]

use gridloc::sync::ClockTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<ClockTable>(data);
});
