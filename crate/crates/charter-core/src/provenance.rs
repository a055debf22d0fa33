//! Provenance: detached signatures over chart archives, stored in sidecar
//! `.prov` files and checked before install.

use crate::chart::ChartArchive;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use thiserror::Error;

const SIG_BEGIN: &str = "-----BEGIN SIGNATURE-----";
const SIG_END: &str = "-----END SIGNATURE-----";

#[derive(Debug, Error)]
pub enum ProvenanceError {
    #[error("key is unusable for signing (no private part)")]
    KeyUnusable,
    #[error("archive digest does not match provenance record")]
    DigestMismatch,
    #[error("no trusted key verifies the signature")]
    SignatureInvalid,
    #[error("provenance record missing")]
    MissingProvenance,
    #[error("malformed provenance file: {0}")]
    Malformed(String),
    #[error("malformed key material: {0}")]
    BadKey(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Signing key pair. The private part is optional; verification needs only
/// the public part.
#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public_key: Vec<u8>,
    pub private_key: Option<Vec<u8>>,
    pub fingerprint: String,
}

/// Fingerprint: sha-256 of the public key bytes, truncated to 16 hex chars.
pub fn fingerprint(public_key: &[u8]) -> String {
    hex::encode(Sha256::digest(public_key))[..16].to_string()
}

impl KeyPair {
    pub fn generate() -> KeyPair {
        let signing = SigningKey::generate(&mut rand::rngs::OsRng);
        let public = signing.verifying_key().to_bytes().to_vec();
        KeyPair {
            fingerprint: fingerprint(&public),
            public_key: public,
            private_key: Some(signing.to_bytes().to_vec()),
        }
    }

    pub fn public_only(public_key: Vec<u8>) -> KeyPair {
        KeyPair {
            fingerprint: fingerprint(&public_key),
            public_key,
            private_key: None,
        }
    }

    /// Write `<path>` (private seed) and `<path>.pub` (public key) as raw
    /// bytes.
    pub fn save(&self, path: &Path) -> Result<(), ProvenanceError> {
        let private = self
            .private_key
            .as_ref()
            .ok_or(ProvenanceError::KeyUnusable)?;
        fs::write(path, private)?;
        let mut pub_path = path.as_os_str().to_owned();
        pub_path.push(".pub");
        fs::write(Path::new(&pub_path), &self.public_key)?;
        Ok(())
    }

    pub fn load_private(path: &Path) -> Result<KeyPair, ProvenanceError> {
        let seed = fs::read(path)?;
        let seed: [u8; 32] = seed
            .try_into()
            .map_err(|_| ProvenanceError::BadKey("private key must be 32 bytes".into()))?;
        let signing = SigningKey::from_bytes(&seed);
        let public = signing.verifying_key().to_bytes().to_vec();
        Ok(KeyPair {
            fingerprint: fingerprint(&public),
            public_key: public,
            private_key: Some(seed.to_vec()),
        })
    }

    pub fn load_public(path: &Path) -> Result<KeyPair, ProvenanceError> {
        let public = fs::read(path)?;
        if public.len() != 32 {
            return Err(ProvenanceError::BadKey("public key must be 32 bytes".into()));
        }
        Ok(KeyPair::public_only(public))
    }
}

/// Digest plus detached signature proving archive integrity and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceRecord {
    pub chart_name: String,
    pub chart_version: String,
    /// `sha256:<hex> <filename>`
    pub digest_line: String,
    pub signature: Vec<u8>,
    pub signer_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationResult {
    pub signer_id: String,
}

fn canonical_payload(name: &str, version: &str, digest_line: &str) -> Vec<u8> {
    format!("{name}\n{version}\n{digest_line}\n").into_bytes()
}

fn digest_line_for(archive: &ChartArchive) -> String {
    format!("sha256:{} {}", archive.digest, archive.filename)
}

/// Chart name/version from an archive filename `<name>-<version>.tgz`.
fn name_version(filename: &str) -> (String, String) {
    let stem = filename.strip_suffix(".tgz").unwrap_or(filename);
    // version starts at the last dash followed by a digit
    if let Some(idx) = stem
        .char_indices()
        .rev()
        .find(|(i, c)| {
            *c == '-'
                && stem[i + 1..]
                    .chars()
                    .next()
                    .map(|n| n.is_ascii_digit())
                    .unwrap_or(false)
        })
        .map(|(i, _)| i)
    {
        (stem[..idx].to_string(), stem[idx + 1..].to_string())
    } else {
        (stem.to_string(), String::new())
    }
}

/// Sign an archive, producing the record for its `.prov` sidecar.
pub fn sign(archive: &ChartArchive, key: &KeyPair) -> Result<ProvenanceRecord, ProvenanceError> {
    let seed = key.private_key.as_ref().ok_or(ProvenanceError::KeyUnusable)?;
    let seed: [u8; 32] = seed
        .as_slice()
        .try_into()
        .map_err(|_| ProvenanceError::BadKey("private key must be 32 bytes".into()))?;
    let signing = SigningKey::from_bytes(&seed);
    let (name, version) = name_version(&archive.filename);
    let digest_line = digest_line_for(archive);
    let signature = signing.sign(&canonical_payload(&name, &version, &digest_line));
    Ok(ProvenanceRecord {
        chart_name: name,
        chart_version: version,
        digest_line,
        signature: signature.to_bytes().to_vec(),
        signer_id: key.fingerprint.clone(),
    })
}

/// Check archive integrity against the record's digest line, then check the
/// signature against each trusted key. Returns the matching signer.
pub fn verify(
    archive: &ChartArchive,
    record: &ProvenanceRecord,
    trusted_keys: &[Vec<u8>],
) -> Result<VerificationResult, ProvenanceError> {
    let expected = digest_line_for(archive);
    if record.digest_line != expected {
        return Err(ProvenanceError::DigestMismatch);
    }
    let sig_bytes: [u8; 64] = record
        .signature
        .as_slice()
        .try_into()
        .map_err(|_| ProvenanceError::SignatureInvalid)?;
    let signature = Signature::from_bytes(&sig_bytes);
    let payload = canonical_payload(&record.chart_name, &record.chart_version, &record.digest_line);
    for key in trusted_keys {
        let Ok(bytes): Result<[u8; 32], _> = key.as_slice().try_into() else {
            continue;
        };
        let Ok(verifying) = VerifyingKey::from_bytes(&bytes) else {
            continue;
        };
        if verifying.verify(&payload, &signature).is_ok() {
            return Ok(VerificationResult {
                signer_id: fingerprint(key),
            });
        }
    }
    Err(ProvenanceError::SignatureInvalid)
}

impl ProvenanceRecord {
    /// Serialize to the `.prov` text format: three header lines then a
    /// base64 signature block.
    pub fn to_text(&self) -> String {
        let sig = base64::engine::general_purpose::STANDARD.encode(&self.signature);
        format!(
            "{}\n{}\n{}\n{SIG_BEGIN}\n{sig}\n{SIG_END}\n",
            self.chart_name, self.chart_version, self.digest_line
        )
    }

    pub fn from_text(text: &str) -> Result<ProvenanceRecord, ProvenanceError> {
        let mut lines = text.lines();
        let chart_name = lines
            .next()
            .ok_or_else(|| ProvenanceError::Malformed("missing name line".into()))?
            .to_string();
        let chart_version = lines
            .next()
            .ok_or_else(|| ProvenanceError::Malformed("missing version line".into()))?
            .to_string();
        let digest_line = lines
            .next()
            .ok_or_else(|| ProvenanceError::Malformed("missing digest line".into()))?
            .to_string();
        if lines.next() != Some(SIG_BEGIN) {
            return Err(ProvenanceError::Malformed("missing signature block".into()));
        }
        let mut sig_b64 = String::new();
        for line in lines.by_ref() {
            if line == SIG_END {
                break;
            }
            sig_b64.push_str(line.trim());
        }
        let signature = base64::engine::general_purpose::STANDARD
            .decode(&sig_b64)
            .map_err(|e| ProvenanceError::Malformed(format!("bad signature base64: {e}")))?;
        Ok(ProvenanceRecord {
            chart_name,
            chart_version,
            digest_line,
            signature,
            signer_id: String::new(),
        })
    }

    /// Write the sidecar next to the archive: `<filename>.prov`.
    pub fn write_sidecar(&self, archive_path: &Path) -> Result<(), ProvenanceError> {
        let path = sidecar_path(archive_path);
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_sidecar(archive_path: &Path) -> Result<ProvenanceRecord, ProvenanceError> {
        let path = sidecar_path(archive_path);
        if !path.exists() {
            return Err(ProvenanceError::MissingProvenance);
        }
        let text = fs::read_to_string(path)?;
        ProvenanceRecord::from_text(&text)
    }
}

pub fn sidecar_path(archive_path: &Path) -> std::path::PathBuf {
    let mut s = archive_path.as_os_str().to_os_string();
    s.push(".prov");
    std::path::PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn archive() -> ChartArchive {
        ChartArchive::from_bytes(b"fake archive bytes".to_vec(), "web-0.1.0.tgz".to_string())
    }

    #[test]
    fn sign_verify_round_trip() {
        let key = KeyPair::generate();
        let a = archive();
        let record = sign(&a, &key).unwrap();
        let result = verify(&a, &record, &[key.public_key.clone()]).unwrap();
        assert_eq!(result.signer_id, key.fingerprint);
        assert_eq!(record.chart_name, "web");
        assert_eq!(record.chart_version, "0.1.0");
    }

    #[test]
    fn verify_with_different_key_fails() {
        let key = KeyPair::generate();
        let other = KeyPair::generate();
        let a = archive();
        let record = sign(&a, &key).unwrap();
        assert!(matches!(
            verify(&a, &record, &[other.public_key]),
            Err(ProvenanceError::SignatureInvalid)
        ));
    }

    #[test]
    fn empty_trusted_keys_fails() {
        let key = KeyPair::generate();
        let a = archive();
        let record = sign(&a, &key).unwrap();
        assert!(matches!(
            verify(&a, &record, &[]),
            Err(ProvenanceError::SignatureInvalid)
        ));
    }

    #[test]
    fn public_only_key_cannot_sign() {
        let key = KeyPair::generate();
        let public = KeyPair::public_only(key.public_key);
        assert!(matches!(
            sign(&archive(), &public),
            Err(ProvenanceError::KeyUnusable)
        ));
    }

    #[test]
    fn tampered_archive_is_digest_mismatch() {
        let key = KeyPair::generate();
        let a = archive();
        let record = sign(&a, &key).unwrap();
        let mut tampered_bytes = a.bytes.clone();
        tampered_bytes[0] ^= 0x01;
        let tampered = ChartArchive::from_bytes(tampered_bytes, a.filename.clone());
        assert!(matches!(
            verify(&tampered, &record, &[key.public_key]),
            Err(ProvenanceError::DigestMismatch)
        ));
    }

    #[test]
    fn tampered_signature_is_invalid() {
        let key = KeyPair::generate();
        let a = archive();
        let mut record = sign(&a, &key).unwrap();
        record.signature[10] ^= 0xff;
        assert!(matches!(
            verify(&a, &record, &[key.public_key]),
            Err(ProvenanceError::SignatureInvalid)
        ));
    }

    #[test]
    fn prov_text_round_trips() {
        let key = KeyPair::generate();
        let record = sign(&archive(), &key).unwrap();
        let text = record.to_text();
        let parsed = ProvenanceRecord::from_text(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
        assert_eq!(parsed.signature, record.signature);
    }

    #[test]
    fn fingerprint_is_16_hex_chars() {
        let key = KeyPair::generate();
        assert_eq!(key.fingerprint.len(), 16);
        assert!(key.fingerprint.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn key_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let key = KeyPair::generate();
        let path = dir.path().join("signing.key");
        key.save(&path).unwrap();
        let private = KeyPair::load_private(&path).unwrap();
        let public = KeyPair::load_public(&dir.path().join("signing.key.pub")).unwrap();
        assert_eq!(private.public_key, key.public_key);
        assert_eq!(public.fingerprint, key.fingerprint);
    }

    #[test]
    fn version_split_handles_dashed_names() {
        assert_eq!(
            name_version("my-app-1.2.3.tgz"),
            ("my-app".to_string(), "1.2.3".to_string())
        );
    }

    proptest! {
        #[test]
        fn single_byte_mutations_fail_verification(
            seed in proptest::collection::vec(any::<u8>(), 32..200),
            pick in any::<usize>(),
            bit in 0u8..8
        ) {
            let key = KeyPair::generate();
            let a = ChartArchive::from_bytes(seed.clone(), "c-1.0.0.tgz".to_string());
            let record = sign(&a, &key).unwrap();
            let mut mutated = seed;
            let idx = pick % mutated.len();
            mutated[idx] ^= 1 << bit;
            let tampered = ChartArchive::from_bytes(mutated, a.filename.clone());
            prop_assert!(matches!(
                verify(&tampered, &record, &[key.public_key.clone()]),
                Err(ProvenanceError::DigestMismatch)
            ));
        }
    }
}
