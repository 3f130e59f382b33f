//! Content hashes of parameter namespaces.

use hazeloop_core::param::ParamStore;
use sha2::{Digest, Sha256};

/// SHA-256 over the names, shapes and exact bit patterns of every tensor
/// whose name starts with `prefix`, in store order.
pub fn namespace_hash(store: &ParamStore, prefix: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Hex digest of the stage-1 network's tensors.
pub fn idn_hash(store: &ParamStore) -> String {
    hex(&namespace_hash(store, "idn."))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, as hex.
pub fn file_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hazeloop_core::tensor::Tensor;

    #[test]
    fn hash_sees_only_the_namespace() {
        let mut s = ParamStore::new();
        s.insert("idn.a", Tensor::scalar(1.0));
        let b = s.insert("tfga.b", Tensor::scalar(2.0));
        let h0 = idn_hash(&s);
        *s.get_mut(b) = Tensor::scalar(3.0);
        assert_eq!(idn_hash(&s), h0);
        let a = s.id("idn.a").unwrap();
        *s.get_mut(a) = Tensor::scalar(1.0 + f64::EPSILON);
        assert_ne!(idn_hash(&s), h0);
    }
}
