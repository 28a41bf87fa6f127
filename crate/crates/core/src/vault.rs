//! Encrypted storage for password images and the system decoy pool.
//!
//! Images are sealed with ChaCha20-Poly1305 under a per-owner key derived by
//! HKDF-SHA256 from the server master secret. The associated data binds the
//! image id, owner, content type and length, so a record cannot be moved to
//! another id or owner without failing authentication. Plaintext never touches
//! the disk.
//!
//! On disk the vault is a flat directory with one JSON record per image.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use parking_lot::RwLock;
use rand::rngs::OsRng;
use rand::{Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;

use crate::{ImageId, UserId};

/// Largest accepted image.
pub const MAX_IMAGE_BYTES: usize = 5 * 1024 * 1024;

const NONCE_LEN: usize = 12;
const KDF_SALT: &[u8] = b"ccpauth/vault/v1";
const RECORD_EXT: &str = "json";

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("image is empty")]
    Empty,
    #[error("image of {0} bytes exceeds the {MAX_IMAGE_BYTES} byte limit")]
    TooLarge(usize),
    #[error("unsupported content type {0:?}")]
    UnsupportedType(String),
    #[error("vault configuration: {0}")]
    Config(String),
    #[error("image not found")]
    NotFound,
    #[error("image failed integrity check")]
    Integrity,
    #[error("requester may not read this image")]
    Unauthorized,
    #[error("decoy pool exhausted: need {needed}, {available} eligible")]
    PoolExhausted { needed: usize, available: usize },
    #[error("vault storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt vault record {path}: {reason}")]
    CorruptRecord { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContentType {
    Png,
    Jpeg,
}

impl ContentType {
    pub fn as_str(self) -> &'static str {
        match self {
            ContentType::Png => "image/png",
            ContentType::Jpeg => "image/jpeg",
        }
    }

    /// Guesses the type from a file extension.
    pub fn from_extension(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(ContentType::Png),
            "jpg" | "jpeg" => Some(ContentType::Jpeg),
            _ => None,
        }
    }
}

impl fmt::Display for ContentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContentType {
    type Err = VaultError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image/png" => Ok(ContentType::Png),
            "image/jpeg" | "image/jpg" => Ok(ContentType::Jpeg),
            _ => Err(VaultError::UnsupportedType(s.to_string())),
        }
    }
}

impl Serialize for ContentType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ContentType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Who an image belongs to. Decoys belong to the system.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Owner {
    System,
    User(UserId),
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::System => f.write_str("SYSTEM"),
            Owner::User(id) => write!(f, "user:{id}"),
        }
    }
}

impl FromStr for Owner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "SYSTEM" {
            return Ok(Owner::System);
        }
        match s.strip_prefix("user:") {
            Some(id) if !id.is_empty() => Ok(Owner::User(UserId::from(id))),
            _ => Err(format!("bad owner {s:?}")),
        }
    }
}

impl Serialize for Owner {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Owner {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 256-bit server master secret.
#[derive(Clone)]
pub struct MasterKey([u8; 32]);

impl MasterKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        MasterKey(bytes)
    }

    pub fn generate() -> Self {
        let mut k = [0u8; 32];
        OsRng.fill_bytes(&mut k);
        MasterKey(k)
    }

    /// Accepts 64 hex characters or base64 of exactly 32 bytes.
    pub fn parse(text: &str) -> Result<Self, VaultError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(VaultError::Config("master key is empty".into()));
        }
        let bytes = if text.len() == 64 && text.bytes().all(|b| b.is_ascii_hexdigit()) {
            hex::decode(text).map_err(|e| VaultError::Config(e.to_string()))?
        } else {
            B64.decode(text)
                .map_err(|_| VaultError::Config("master key is neither hex nor base64".into()))?
        };
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|v: Vec<u8>| VaultError::Config(format!("master key is {} bytes, expected 32", v.len())))?;
        Ok(MasterKey(arr))
    }

    fn cipher_for(&self, owner: &Owner) -> ChaCha20Poly1305 {
        let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), &self.0);
        let mut okm = [0u8; 32];
        hk.expand(owner.to_string().as_bytes(), &mut okm)
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        ChaCha20Poly1305::new(Key::from_slice(&okm))
    }
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterKey(..)")
    }
}

mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

/// One sealed image as persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredImage {
    pub image_id: ImageId,
    pub owner: Owner,
    pub content_type: ContentType,
    pub plaintext_length: u64,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
}

impl StoredImage {
    fn associated_data(&self) -> Vec<u8> {
        format!(
            "{}\0{}\0{}\0{}",
            self.image_id, self.owner, self.content_type, self.plaintext_length
        )
        .into_bytes()
    }
}

/// Who is asking to read an image.
#[derive(Debug, Clone, Copy)]
pub enum Requester<'a> {
    /// The image's owner.
    Owner(&'a Owner),
    /// A login session that presented these images in its challenges.
    Challenge(&'a [ImageId]),
}

pub struct Vault {
    master: MasterKey,
    dir: Option<PathBuf>,
    records: RwLock<HashMap<ImageId, Arc<StoredImage>>>,
    decoys: RwLock<BTreeSet<ImageId>>,
}

impl fmt::Debug for Vault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vault")
            .field("dir", &self.dir)
            .field("images", &self.records.read().len())
            .field("decoys", &self.decoys.read().len())
            .finish()
    }
}

impl Vault {
    /// A vault that keeps records in memory only.
    pub fn in_memory(master: MasterKey) -> Self {
        Vault {
            master,
            dir: None,
            records: RwLock::new(HashMap::new()),
            decoys: RwLock::new(BTreeSet::new()),
        }
    }

    /// Opens (creating if needed) a vault directory and loads its records.
    pub fn open_dir(dir: impl Into<PathBuf>, master: MasterKey) -> Result<Self, VaultError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut records = HashMap::new();
        let mut decoys = BTreeSet::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(RECORD_EXT) {
                continue;
            }
            let raw = fs::read(&path)?;
            let record: StoredImage = serde_json::from_slice(&raw).map_err(|e| VaultError::CorruptRecord {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if record.owner == Owner::System {
                decoys.insert(record.image_id.clone());
            }
            records.insert(record.image_id.clone(), Arc::new(record));
        }
        tracing::info!(dir = %dir.display(), images = records.len(), decoys = decoys.len(), "vault loaded");
        Ok(Vault {
            master,
            dir: Some(dir),
            records: RwLock::new(records),
            decoys: RwLock::new(decoys),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Encrypts and stores an image.
    pub fn seal(&self, plaintext: &[u8], owner: Owner, content_type: ContentType) -> Result<StoredImage, VaultError> {
        if plaintext.is_empty() {
            return Err(VaultError::Empty);
        }
        if plaintext.len() > MAX_IMAGE_BYTES {
            return Err(VaultError::TooLarge(plaintext.len()));
        }
        let mut nonce = vec![0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let mut record = StoredImage {
            image_id: ImageId::random(),
            owner,
            content_type,
            plaintext_length: plaintext.len() as u64,
            nonce,
            ciphertext: Vec::new(),
        };
        let aad = record.associated_data();
        record.ciphertext = self
            .master
            .cipher_for(&record.owner)
            .encrypt(Nonce::from_slice(&record.nonce), Payload { msg: plaintext, aad: &aad })
            .map_err(|_| VaultError::Config("encryption failed".into()))?;

        self.persist(&record)?;
        let is_decoy = record.owner == Owner::System;
        let id = record.image_id.clone();
        self.records.write().insert(id.clone(), Arc::new(record.clone()));
        if is_decoy {
            self.decoys.write().insert(id);
        }
        Ok(record)
    }

    fn persist(&self, record: &StoredImage) -> Result<(), VaultError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, record).map_err(std::io::Error::from)?;
        tmp.flush()?;
        tmp.as_file().sync_all()?;
        tmp.persist(dir.join(format!("{}.{RECORD_EXT}", record.image_id)))
            .map_err(|e| e.error)?;
        Ok(())
    }

    /// Decrypts an image for an authorized requester.
    pub fn open(&self, image_id: &ImageId, requester: Requester<'_>) -> Result<Vec<u8>, VaultError> {
        let record = self.records.read().get(image_id).cloned().ok_or(VaultError::NotFound)?;
        let allowed = match requester {
            Requester::Owner(who) => *who == record.owner,
            Requester::Challenge(ids) => ids.contains(image_id),
        };
        if !allowed {
            return Err(VaultError::Unauthorized);
        }
        self.open_record(&record)
    }

    /// Decrypts a record using the key of the owner it names.
    pub fn open_record(&self, record: &StoredImage) -> Result<Vec<u8>, VaultError> {
        if record.nonce.len() != NONCE_LEN {
            return Err(VaultError::Integrity);
        }
        let aad = record.associated_data();
        let plain = self
            .master
            .cipher_for(&record.owner)
            .decrypt(
                Nonce::from_slice(&record.nonce),
                Payload {
                    msg: &record.ciphertext,
                    aad: &aad,
                },
            )
            .map_err(|_| VaultError::Integrity)?;
        if plain.len() as u64 != record.plaintext_length {
            return Err(VaultError::Integrity);
        }
        Ok(plain)
    }

    pub fn record(&self, image_id: &ImageId) -> Option<StoredImage> {
        self.records.read().get(image_id).map(|r| (**r).clone())
    }

    pub fn content_type(&self, image_id: &ImageId) -> Option<ContentType> {
        self.records.read().get(image_id).map(|r| r.content_type)
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seals a system-owned image and adds it to the decoy pool.
    pub fn add_decoy(&self, plaintext: &[u8], content_type: ContentType) -> Result<ImageId, VaultError> {
        Ok(self.seal(plaintext, Owner::System, content_type)?.image_id)
    }

    /// Seals every png/jpeg file in `dir` as a decoy. Returns how many were added.
    pub fn ingest_decoys(&self, dir: &Path) -> Result<usize, VaultError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && ContentType::from_extension(p).is_some())
            .collect();
        paths.sort();
        let mut added = 0;
        for path in paths {
            let ct = ContentType::from_extension(&path).expect("filtered above");
            let bytes = fs::read(&path)?;
            match self.add_decoy(&bytes, ct) {
                Ok(_) => added += 1,
                Err(e @ (VaultError::Empty | VaultError::TooLarge(_))) => {
                    tracing::warn!(path = %path.display(), error = %e, "skipping decoy");
                }
                Err(e) => return Err(e),
            }
        }
        Ok(added)
    }

    pub fn decoy_count(&self) -> usize {
        self.decoys.read().len()
    }

    pub fn is_decoy(&self, image_id: &ImageId) -> bool {
        self.decoys.read().contains(image_id)
    }

    /// Picks `count` distinct decoys uniformly from the pool, skipping `exclude`.
    pub fn pick_decoys<R: Rng + ?Sized>(
        &self,
        exclude: &[ImageId],
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<ImageId>, VaultError> {
        let pool = self.decoys.read();
        let eligible: Vec<&ImageId> = pool.iter().filter(|id| !exclude.contains(id)).collect();
        if eligible.len() < count {
            return Err(VaultError::PoolExhausted {
                needed: count,
                available: eligible.len(),
            });
        }
        Ok(rand::seq::index::sample(rng, eligible.len(), count)
            .into_iter()
            .map(|i| eligible[i].clone())
            .collect())
    }
}
