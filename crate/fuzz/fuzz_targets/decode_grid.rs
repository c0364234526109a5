#![no_main]

use gridloc::grid::{decode_grid, encode_grid};
use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};

fuzz_target!(|data: &[u8]| {
    // Also try the input sealed with a valid digest, so mutations reach the
    // structural checks instead of dying on the checksum.
    let sealed = [data, Sha256::digest(data).as_slice()].concat();
    for bytes in [data, &sealed] {
        let Ok(grid) = decode_grid(bytes) else { continue };
        let encoded = encode_grid(&grid);
        let again = decode_grid(&encoded).expect("re-decodes its own encoding");
        assert_eq!(encode_grid(&again), encoded);
    }
});
