//! AES-CCM-128 with 8-byte tags, HMAC-SHA-256 and the derivations built on
//! them.

use aes::Aes128;
use ccm::aead::generic_array::GenericArray;
use ccm::aead::{AeadInPlace, KeyInit};
use ccm::consts::{U13, U8};
use ccm::Ccm;
use hmac::{Hmac, Mac};
use sha2::{Digest, Sha256};

pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 13;
pub const TAG_LEN: usize = 8;
pub const IMPLICIT_IV_LEN: usize = 11;
pub const SIGNATURE_LEN: usize = 32;

pub type Key = [u8; KEY_LEN];
pub type Nonce = [u8; NONCE_LEN];
pub type Tag = [u8; TAG_LEN];

type AesCcm = Ccm<Aes128, U8, U13>;
type HmacSha256 = Hmac<Sha256>;

pub(crate) fn ccm_seal(key: &Key, nonce: &Nonce, aad: &[u8], buf: &mut [u8]) -> Tag {
    let cipher = AesCcm::new(GenericArray::from_slice(key));
    let tag = cipher
        .encrypt_in_place_detached(GenericArray::from_slice(nonce), aad, buf)
        .expect("CCM input within length limits");
    tag.into()
}

pub(crate) fn ccm_open(key: &Key, nonce: &Nonce, aad: &[u8], buf: &mut [u8], tag: &Tag) -> bool {
    let cipher = AesCcm::new(GenericArray::from_slice(key));
    cipher
        .decrypt_in_place_detached(GenericArray::from_slice(nonce), aad, buf, GenericArray::from_slice(tag))
        .is_ok()
}

fn hmac_with(key: &[u8]) -> HmacSha256 {
    <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length")
}

pub fn hmac_sign(key: &[u8], bytes: &[u8]) -> [u8; SIGNATURE_LEN] {
    let mut mac = hmac_with(key);
    mac.update(bytes);
    mac.finalize().into_bytes().into()
}

pub fn hmac_verify(key: &[u8], bytes: &[u8], signature: &[u8]) -> bool {
    let mut mac = hmac_with(key);
    mac.update(bytes);
    mac.verify_slice(signature).is_ok()
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Implicit part of the nonce, derived from the context salt and the
/// resource URI. An empty URI hashes the salt alone.
pub fn derive_implicit_iv(context_salt: &[u8], resource_uri: &[u8]) -> [u8; IMPLICIT_IV_LEN] {
    let mut h = Sha256::new();
    h.update((context_salt.len() as u32).to_be_bytes());
    h.update(context_salt);
    h.update(resource_uri);
    let digest = h.finalize();
    let mut iv = [0; IMPLICIT_IV_LEN];
    iv.copy_from_slice(&digest[..IMPLICIT_IV_LEN]);
    iv
}

/// Labelled key derivation from pre-shared key material.
pub(crate) fn derive(psk: &[u8], label: &[u8], info: &[u8]) -> [u8; 32] {
    let mut mac = hmac_with(psk);
    mac.update(label);
    mac.update(&[0]);
    mac.update(info);
    mac.finalize().into_bytes().into()
}

pub(crate) fn derive_key(psk: &[u8], label: &[u8], info: &[u8]) -> Key {
    let mut key = [0; KEY_LEN];
    key.copy_from_slice(&derive(psk, label, info)[..KEY_LEN]);
    key
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unhex(s: &str) -> Vec<u8> {
        let s: String = s.split_whitespace().collect();
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }

    // RFC 3610, packet vector #1.
    #[test]
    fn ccm_known_answer() {
        let key: Key = unhex("C0C1C2C3C4C5C6C7C8C9CACBCCCDCECF").try_into().unwrap();
        let nonce: Nonce = unhex("00000003020100A0A1A2A3A4A5").try_into().unwrap();
        let aad = unhex("0001020304050607");
        let mut buf = unhex("08090A0B0C0D0E0F101112131415161718191A1B1C1D1E");
        let tag = ccm_seal(&key, &nonce, &aad, &mut buf);
        assert_eq!(buf, unhex("588C979A61C663D2F066D0C2C0F989806D5F6B61DAC384"));
        assert_eq!(tag.to_vec(), unhex("17E8D12CFDF926E0"));
        assert!(ccm_open(&key, &nonce, &aad, &mut buf, &tag));
        assert_eq!(buf, unhex("08090A0B0C0D0E0F101112131415161718191A1B1C1D1E"));
    }

    // RFC 4231, test case 2.
    #[test]
    fn hmac_known_answer() {
        let sig = hmac_sign(b"Jefe", b"what do ya want for nothing?");
        assert_eq!(
            sig.to_vec(),
            unhex("5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843")
        );
        assert!(hmac_verify(b"Jefe", b"what do ya want for nothing?", &sig));
    }

    #[test]
    fn implicit_iv_deterministic_and_defined_for_empty_uri() {
        assert_eq!(
            derive_implicit_iv(b"salt", b"/temp"),
            derive_implicit_iv(b"salt", b"/temp")
        );
        assert_ne!(
            derive_implicit_iv(b"salt", b"/temp"),
            derive_implicit_iv(b"salt", b"/hum")
        );
        let empty = derive_implicit_iv(b"salt", b"");
        assert_eq!(empty.len(), IMPLICIT_IV_LEN);
    }
}
