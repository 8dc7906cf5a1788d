use sha2::{Digest, Sha256};

/// Independent, reproducible seed for the stream named `label` under `base`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Hex SHA-256 of a descriptor string.
pub fn digest_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_eq!(derive_seed(7, "hybrid"), derive_seed(7, "hybrid"));
        assert_ne!(derive_seed(7, "hybrid"), derive_seed(7, "early"));
        assert_ne!(derive_seed(7, "hybrid"), derive_seed(8, "hybrid"));
    }
}
