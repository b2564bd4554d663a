//! HKDF-SHA256 key schedule and ChaCha20-Poly1305 sealing with counter nonces.

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hkdf::Hkdf;
use sha2::Sha256;
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const IV_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const PSK_LEN: usize = 32;

pub type Psk = [u8; PSK_LEN];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("authentication failed")]
    Auth,
    #[error("ciphertext shorter than the tag")]
    Short,
}

#[derive(Clone, PartialEq, Eq)]
pub struct DirectionalKeys {
    pub key: [u8; KEY_LEN],
    pub iv: [u8; IV_LEN],
}

impl std::fmt::Debug for DirectionalKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DirectionalKeys(..)")
    }
}

/// `HKDF-Expand(HKDF-Extract(salt, psk), label + " key" | " iv")`.
pub fn derive_keys(psk: &Psk, salt: &[u8], label: &str) -> DirectionalKeys {
    let hk = Hkdf::<Sha256>::new(Some(salt), psk);
    let mut key = [0u8; KEY_LEN];
    let mut iv = [0u8; IV_LEN];
    hk.expand(format!("{label} key").as_bytes(), &mut key)
        .expect("32 bytes is a valid hkdf length");
    hk.expand(format!("{label} iv").as_bytes(), &mut iv)
        .expect("12 bytes is a valid hkdf length");
    DirectionalKeys { key, iv }
}

/// iv XOR big-endian counter in the low 8 bytes.
pub fn nonce_for(iv: &[u8; IV_LEN], counter: u64) -> [u8; IV_LEN] {
    let mut n = *iv;
    for (b, c) in n[4..].iter_mut().zip(counter.to_be_bytes()) {
        *b ^= c;
    }
    n
}

pub struct PacketCipher {
    aead: ChaCha20Poly1305,
    iv: [u8; IV_LEN],
}

impl PacketCipher {
    pub fn new(keys: &DirectionalKeys) -> Self {
        Self {
            aead: ChaCha20Poly1305::new(Key::from_slice(&keys.key)),
            iv: keys.iv,
        }
    }

    /// Encrypts `buf[start..]` in place and appends the tag; `buf[..start]` is the associated data.
    pub fn seal_in_place(&self, counter: u64, buf: &mut Vec<u8>, start: usize) {
        let nonce = nonce_for(&self.iv, counter);
        let (aad, body) = buf.split_at_mut(start);
        let tag = self
            .aead
            .encrypt_in_place_detached(Nonce::from_slice(&nonce), aad, body)
            .expect("payload within aead limits");
        buf.extend_from_slice(&tag);
    }

    pub fn seal(&self, counter: u64, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        let mut buf = Vec::with_capacity(aad.len() + plaintext.len() + TAG_LEN);
        buf.extend_from_slice(aad);
        buf.extend_from_slice(plaintext);
        self.seal_in_place(counter, &mut buf, aad.len());
        buf.split_off(aad.len())
    }

    /// Opens `ct || tag` and returns the plaintext.
    pub fn open(&self, counter: u64, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < TAG_LEN {
            return Err(CryptoError::Short);
        }
        let (ct, tag) = sealed.split_at(sealed.len() - TAG_LEN);
        let mut out = ct.to_vec();
        let nonce = nonce_for(&self.iv, counter);
        self.aead
            .decrypt_in_place_detached(Nonce::from_slice(&nonce), aad, &mut out, Tag::from_slice(tag))
            .map_err(|_| CryptoError::Auth)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonce_xor() {
        let iv = [0xAA; 12];
        let n = nonce_for(&iv, 1);
        assert_eq!(&n[..11], &[0xAA; 11]);
        assert_eq!(n[11], 0xAB);
        assert_eq!(nonce_for(&iv, 0), iv);
    }

    #[test]
    fn seal_open_round_trip_and_tamper() {
        let k = derive_keys(&[7; 32], b"salt", "test c2s");
        let c = PacketCipher::new(&k);
        let sealed = c.seal(5, b"hdr", b"payload");
        assert_eq!(sealed.len(), 7 + TAG_LEN);
        assert_eq!(c.open(5, b"hdr", &sealed).unwrap(), b"payload");
        assert_eq!(c.open(6, b"hdr", &sealed), Err(CryptoError::Auth));
        assert_eq!(c.open(5, b"hdX", &sealed), Err(CryptoError::Auth));
        let mut flipped = sealed.clone();
        flipped[0] ^= 1;
        assert_eq!(c.open(5, b"hdr", &flipped), Err(CryptoError::Auth));
    }

    #[test]
    fn labels_and_psk_separate_keys() {
        let a = derive_keys(&[1; 32], b"s", "x c2s");
        let b = derive_keys(&[1; 32], b"s", "x s2c");
        let c = derive_keys(&[2; 32], b"s", "x c2s");
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_keys(&[1; 32], b"s", "x c2s"));
    }

    #[test]
    fn hkdf_matches_rfc5869_case1() {
        // RFC 5869 A.1: the extract/expand plumbing behaves like the published vector.
        let ikm = [0x0b; 22];
        let salt: Vec<u8> = (0x00..=0x0c).collect();
        let info: Vec<u8> = (0xf0..=0xf9).collect();
        let hk = Hkdf::<Sha256>::new(Some(&salt), &ikm);
        let mut okm = [0u8; 42];
        hk.expand(&info, &mut okm).unwrap();
        assert_eq!(
            okm[..8],
            [0x3c, 0xb2, 0x5f, 0x25, 0xfa, 0xac, 0xd5, 0x7a]
        );
    }
}
