#![no_main]

use gridloc_cli::manifest::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = RunManifest::parse(text) {
        let again = RunManifest::parse(std::str::from_utf8(&m.to_json()).unwrap()).unwrap();
        assert_eq!(again.to_json(), m.to_json());
    }
});
