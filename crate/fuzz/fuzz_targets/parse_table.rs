#![no_main]

use klq_core::io::{parse_table, write_policy, write_q, write_v, Table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = parse_table(data) {
        let mut buf = Vec::new();
        match &table {
            Table::Policy(p) => write_policy(p, &mut buf).unwrap(),
            Table::Q(q) => write_q(q, &mut buf).unwrap(),
            Table::V(v) => write_v(v, &mut buf).unwrap(),
        }
        parse_table(buf.as_slice()).unwrap();
    }
});
