//! Key files written by `selenc keygen`.
//!
//! A key directory holds `public_key.json` plus either `secret_key.json` or
//! threshold shares `share_<i>.json`. Numbers are big-endian base64; share
//! chunks are hex field elements.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use selenc_core::he::{HeError, KeyPair, PublicKey, SecretKey};
use selenc_core::shamir::{self, KeyShare, ShareConfig, ShareError};

pub const PUBLIC_FILE: &str = "public_key.json";
pub const SECRET_FILE: &str = "secret_key.json";
const SCHEME: &str = "paillier";

#[derive(Debug, thiserror::Error)]
pub enum KeyFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Share(#[from] ShareError),
    #[error("{dir}: no secret key and no shares")]
    NoSecret { dir: String },
    #[error("shares belong to different key sets")]
    MixedSets,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PublicFile {
    scheme: String,
    bits: u64,
    n: String,
    g: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SecretFile {
    scheme: String,
    bits: u64,
    p: String,
    q: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShareFile {
    scheme: String,
    /// Fingerprint of the public key the shares belong to.
    set_id: String,
    index: u8,
    n: usize,
    k: usize,
    chunks: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KeyFileError + '_ {
    move |source| KeyFileError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> KeyFileError {
    KeyFileError::Format { path: path.display().to_string(), msg: msg.into() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), KeyFileError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| KeyFileError::Json { path: path.display().to_string(), source })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, KeyFileError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| KeyFileError::Json { path: path.display().to_string(), source })
}

fn b64_num(path: &Path, field: &str, s: &str) -> Result<BigUint, KeyFileError> {
    let bytes = B64.decode(s).map_err(|e| format_err(path, format!("{field}: {e}")))?;
    Ok(BigUint::from_bytes_be(&bytes))
}

/// Short hex fingerprint of a public key.
pub fn fingerprint(pk: &PublicKey) -> String {
    let digest = Sha256::new_with_prefix(b"selenc/key-fingerprint/v1").chain_update(pk.to_bytes()).finalize();
    hex::encode(&digest[..8])
}

pub fn share_file(dir: &Path, index: u8) -> PathBuf {
    dir.join(format!("share_{index}.json"))
}

pub fn write_public(dir: &Path, pk: &PublicKey) -> Result<PathBuf, KeyFileError> {
    let path = dir.join(PUBLIC_FILE);
    let file = PublicFile {
        scheme: SCHEME.into(),
        bits: pk.bits(),
        n: B64.encode(pk.n().to_bytes_be()),
        g: B64.encode(pk.g().to_bytes_be()),
    };
    write_json(&path, &file)?;
    Ok(path)
}

pub fn read_public(dir: &Path) -> Result<PublicKey, KeyFileError> {
    let path = dir.join(PUBLIC_FILE);
    let file: PublicFile = read_json(&path)?;
    if file.scheme != SCHEME {
        return Err(format_err(&path, format!("unknown scheme {:?}", file.scheme)));
    }
    let n = b64_num(&path, "n", &file.n)?;
    let g = b64_num(&path, "g", &file.g)?;
    let pk = PublicKey::from_modulus(n)?;
    if g != pk.g() {
        return Err(format_err(&path, "g must be n + 1"));
    }
    if pk.bits() != file.bits {
        return Err(format_err(&path, format!("bits says {} but n has {}", file.bits, pk.bits())));
    }
    Ok(pk)
}

pub fn write_secret(dir: &Path, keys: &KeyPair) -> Result<PathBuf, KeyFileError> {
    let path = dir.join(SECRET_FILE);
    let file = SecretFile {
        scheme: SCHEME.into(),
        bits: keys.public.bits(),
        p: B64.encode(keys.secret.p().to_bytes_be()),
        q: B64.encode(keys.secret.q().to_bytes_be()),
    };
    write_json(&path, &file)?;
    Ok(path)
}

/// Split the secret key into `cfg.n` share files, any `cfg.k` of which rebuild it.
pub fn write_shares(dir: &Path, keys: &KeyPair, cfg: ShareConfig, seed: u64) -> Result<Vec<PathBuf>, KeyFileError> {
    let shares = shamir::split_secret(&keys.secret.to_bytes(), cfg, seed)?;
    let set_id = fingerprint(&keys.public);
    shares
        .iter()
        .map(|s| {
            let path = share_file(dir, s.index);
            let file = ShareFile {
                scheme: "shamir-p64".into(),
                set_id: set_id.clone(),
                index: s.index,
                n: cfg.n,
                k: cfg.k,
                chunks: s.chunks.iter().map(|c| format!("{c:016x}")).collect(),
            };
            write_json(&path, &file)?;
            Ok(path)
        })
        .collect()
}

fn read_share(path: &Path) -> Result<(ShareFile, KeyShare), KeyFileError> {
    let file: ShareFile = read_json(path)?;
    let chunks = file
        .chunks
        .iter()
        .map(|c| u64::from_str_radix(c, 16).map_err(|e| format_err(path, format!("chunk {c:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let share = KeyShare { index: file.index, chunks };
    Ok((file, share))
}

/// Load the secret key from `dir`, reconstructing from shares when there is
/// no `secret_key.json`.
pub fn read_secret(dir: &Path) -> Result<SecretKey, KeyFileError> {
    let pk = read_public(dir)?;
    let path = dir.join(SECRET_FILE);
    let sk = if path.exists() {
        let file: SecretFile = read_json(&path)?;
        SecretKey::from_primes(b64_num(&path, "p", &file.p)?, b64_num(&path, "q", &file.q)?)?
    } else {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("share_") && n.ends_with(".json"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(KeyFileError::NoSecret { dir: dir.display().to_string() });
        }
        let loaded = files.iter().map(|p| read_share(p)).collect::<Result<Vec<_>, _>>()?;
        let (first, _) = &loaded[0];
        let (set_id, n, k) = (first.set_id.clone(), first.n, first.k);
        if loaded.iter().any(|(f, _)| f.set_id != set_id || f.n != n || f.k != k) {
            return Err(KeyFileError::MixedSets);
        }
        let shares: Vec<KeyShare> = loaded.into_iter().map(|(_, s)| s).collect();
        SecretKey::from_bytes(&shamir::reconstruct_secret(&shares, ShareConfig::new(n, k)?)?)?
    };
    if sk.public_key().n() != pk.n() {
        return Err(format_err(&path, "secret key does not match public_key.json"));
    }
    Ok(sk)
}
