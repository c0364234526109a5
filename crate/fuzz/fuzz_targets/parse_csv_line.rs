#![no_main]

use gridloc::log::{parse_csv_line, read_log, write_log, LogFormat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(record) = parse_csv_line(line) else { return };
    let mut out = Vec::new();
    write_log(&mut out, LogFormat::Csv, std::slice::from_ref(&record)).unwrap();
    let back = read_log(out.as_slice(), LogFormat::Csv).unwrap();
    assert!(back.malformed.is_empty());
    assert_eq!(back.records, vec![record]);
});
