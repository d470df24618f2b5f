#![no_main]

use libfuzzer_sys::fuzz_target;
use pvkit_core::formats::{query_set_from_parts, QuerySidecar, Tensor};

// Layout: u16 LE length of the sidecar JSON, the JSON, then an embeddings
// tensor in PVT1 form.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let n = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    let (json, tensor) = rest.split_at(n.min(rest.len()));
    let Ok(sidecar) = QuerySidecar::from_json_bytes(json) else {
        return;
    };
    if let Ok(emb) = Tensor::from_bytes(tensor) {
        if let Ok(q) = query_set_from_parts(&sidecar, &emb, None, None) {
            assert_eq!(q.len(), sidecar.n);
        }
    }
});
