//! Single-use three-digit session keys and their delivery.
//!
//! A key holds one grid label per login level. It is stored against the login
//! session that asked for it and can be consumed exactly once; a key older than
//! its TTL is expired instead. Keys reach the user through an [`OtpTransport`],
//! which stands in for the SMS modem of a real deployment.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridLabel, CELL_COUNT};
use crate::SessionId;

/// Digits per key, one per login level.
pub const OTP_LEN: usize = 3;

/// Default key lifetime.
pub fn default_otp_ttl() -> Duration {
    Duration::seconds(120)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OtpError {
    #[error("session already holds a live key")]
    Conflict,
    #[error("no key issued for this session")]
    NotFound,
    #[error("key already used")]
    AlreadyUsed,
    #[error("key expired")]
    Expired,
    #[error("malformed key {0:?}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum DeliveryError {
    #[error("key is not live")]
    NotLive,
    #[error("cannot write key file {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("console write failed: {0}")]
    Console(#[source] std::io::Error),
    #[error("webhook delivery failed: {0}")]
    Webhook(String),
}

/// The three digits of a session key. Digit `i` is the label to click at level `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OtpDigits([GridLabel; OTP_LEN]);

impl OtpDigits {
    pub fn new(digits: [GridLabel; OTP_LEN]) -> Self {
        OtpDigits(digits)
    }

    /// Draws each digit independently and uniformly from 1..=9.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        OtpDigits(std::array::from_fn(|_| {
            GridLabel::new(rng.gen_range(1..=CELL_COUNT)).expect("sampled inside label range")
        }))
    }

    pub fn labels(&self) -> [GridLabel; OTP_LEN] {
        self.0
    }

    /// Label required at `level` (1-based).
    pub fn at_level(&self, level: u8) -> Option<GridLabel> {
        self.0.get(usize::from(level).checked_sub(1)?).copied()
    }
}

impl fmt::Display for OtpDigits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for OtpDigits {
    type Err = OtpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bytes = s.as_bytes();
        if bytes.len() != OTP_LEN {
            return Err(OtpError::Malformed(s.to_string()));
        }
        let mut out = [GridLabel::new(1).expect("1 is a label"); OTP_LEN];
        for (slot, b) in out.iter_mut().zip(bytes) {
            let v = b.wrapping_sub(b'0');
            *slot = GridLabel::new(v).map_err(|_| OtpError::Malformed(s.to_string()))?;
        }
        Ok(OtpDigits(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OtpState {
    Live,
    Consumed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtpKey {
    pub session_id: SessionId,
    pub digits: OtpDigits,
    pub issued_at: DateTime<Utc>,
    pub ttl: Duration,
    pub state: OtpState,
}

impl OtpKey {
    fn is_past_ttl(&self, now: DateTime<Utc>) -> bool {
        now - self.issued_at > self.ttl
    }
}

/// In-memory key store, keyed by session.
#[derive(Debug)]
pub struct OtpStore {
    ttl: Duration,
    keys: Mutex<HashMap<SessionId, OtpKey>>,
}

impl Default for OtpStore {
    fn default() -> Self {
        OtpStore::new(default_otp_ttl())
    }
}

impl OtpStore {
    pub fn new(ttl: Duration) -> Self {
        OtpStore {
            ttl,
            keys: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// Issues a fresh live key for `session_id`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        session_id: &SessionId,
        now: DateTime<Utc>,
        rng: &mut R,
    ) -> Result<OtpKey, OtpError> {
        let mut keys = self.keys.lock();
        if let Some(existing) = keys.get(session_id) {
            if existing.state == OtpState::Live && !existing.is_past_ttl(now) {
                return Err(OtpError::Conflict);
            }
        }
        let key = OtpKey {
            session_id: session_id.clone(),
            digits: OtpDigits::random(rng),
            issued_at: now,
            ttl: self.ttl,
            state: OtpState::Live,
        };
        keys.insert(session_id.clone(), key.clone());
        Ok(key)
    }

    /// Spends the key of `session_id`. Succeeds at most once per key.
    pub fn consume(&self, session_id: &SessionId, now: DateTime<Utc>) -> Result<OtpDigits, OtpError> {
        let mut keys = self.keys.lock();
        let key = keys.get_mut(session_id).ok_or(OtpError::NotFound)?;
        match key.state {
            OtpState::Consumed => Err(OtpError::AlreadyUsed),
            OtpState::Expired => Err(OtpError::Expired),
            OtpState::Live if key.is_past_ttl(now) => {
                key.state = OtpState::Expired;
                Err(OtpError::Expired)
            }
            OtpState::Live => {
                key.state = OtpState::Consumed;
                Ok(key.digits)
            }
        }
    }

    /// Expires every live key past its TTL and returns how many changed.
    pub fn sweep_expired(&self, now: DateTime<Utc>) -> usize {
        let mut keys = self.keys.lock();
        let mut n = 0;
        for key in keys.values_mut() {
            if key.state == OtpState::Live && key.is_past_ttl(now) {
                key.state = OtpState::Expired;
                n += 1;
            }
        }
        n
    }

    pub fn state(&self, session_id: &SessionId) -> Option<OtpState> {
        self.keys.lock().get(session_id).map(|k| k.state)
    }

    /// Drops the record for `session_id` entirely.
    pub fn forget(&self, session_id: &SessionId) {
        self.keys.lock().remove(session_id);
    }

    pub fn len(&self) -> usize {
        self.keys.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    ConsoleEcho,
    FileDrop,
    WebhookPost,
    /// Handed to an in-process consumer; used by embedded harnesses and simulations.
    InProcess,
}

/// Somewhere a key can be sent.
pub trait OtpTransport: Send + Sync {
    fn kind(&self) -> TransportKind;

    /// Writes `otp` for `session_id`. `destination` is the user's registered
    /// address (mobile number) and is only an addressing token here.
    fn send(&self, session_id: &SessionId, destination: &str, otp: &OtpDigits) -> Result<(), DeliveryError>;
}

/// Prints `OTP <session> <digits>` on a diagnostic stream (stderr by default).
pub struct ConsoleEcho {
    out: Mutex<Box<dyn Write + Send>>,
}

impl ConsoleEcho {
    pub fn stderr() -> Self {
        ConsoleEcho::with_writer(Box::new(std::io::stderr()))
    }

    pub fn with_writer(out: Box<dyn Write + Send>) -> Self {
        ConsoleEcho { out: Mutex::new(out) }
    }
}

impl OtpTransport for ConsoleEcho {
    fn kind(&self) -> TransportKind {
        TransportKind::ConsoleEcho
    }

    fn send(&self, session_id: &SessionId, _destination: &str, otp: &OtpDigits) -> Result<(), DeliveryError> {
        let mut out = self.out.lock();
        writeln!(out, "OTP {session_id} {otp}")
            .and_then(|_| out.flush())
            .map_err(DeliveryError::Console)
    }
}

/// Drops `otp-<session>.txt` into a directory.
#[derive(Debug, Clone)]
pub struct FileDrop {
    dir: PathBuf,
}

impl FileDrop {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileDrop { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, session_id: &SessionId) -> PathBuf {
        self.dir.join(format!("otp-{session_id}.txt"))
    }
}

impl OtpTransport for FileDrop {
    fn kind(&self) -> TransportKind {
        TransportKind::FileDrop
    }

    fn send(&self, session_id: &SessionId, _destination: &str, otp: &OtpDigits) -> Result<(), DeliveryError> {
        let path = self.path_for(session_id);
        // Write then rename so readers never observe a partial file.
        let write = || -> std::io::Result<()> {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            writeln!(tmp, "{otp}")?;
            tmp.persist(&path).map_err(|e| e.error)?;
            Ok(())
        };
        write().map_err(|source| DeliveryError::File {
            path: path.clone(),
            source,
        })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct WebhookBody {
    pub session_id: String,
    pub otp: String,
}

/// POSTs `{"session_id": .., "otp": ..}` to a URL.
pub struct WebhookPost {
    url: String,
    agent: ureq::Agent,
}

impl WebhookPost {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(5)))
            .build()
            .into();
        WebhookPost { url: url.into(), agent }
    }
}

impl OtpTransport for WebhookPost {
    fn kind(&self) -> TransportKind {
        TransportKind::WebhookPost
    }

    fn send(&self, session_id: &SessionId, _destination: &str, otp: &OtpDigits) -> Result<(), DeliveryError> {
        let body = WebhookBody {
            session_id: session_id.to_string(),
            otp: otp.to_string(),
        };
        self.agent
            .post(&self.url)
            .send_json(&body)
            .map(|_| ())
            .map_err(|e| DeliveryError::Webhook(e.to_string()))
    }
}

/// Keeps delivered keys in memory, keyed by session.
#[derive(Debug, Default)]
pub struct InProcessOutbox {
    delivered: Mutex<HashMap<SessionId, OtpDigits>>,
}

impl InProcessOutbox {
    pub fn new() -> Self {
        InProcessOutbox::default()
    }

    /// Removes and returns the key delivered for `session_id`.
    pub fn take(&self, session_id: &SessionId) -> Option<OtpDigits> {
        self.delivered.lock().remove(session_id)
    }
}

impl OtpTransport for InProcessOutbox {
    fn kind(&self) -> TransportKind {
        TransportKind::InProcess
    }

    fn send(&self, session_id: &SessionId, _destination: &str, otp: &OtpDigits) -> Result<(), DeliveryError> {
        self.delivered.lock().insert(session_id.clone(), *otp);
        Ok(())
    }
}

impl<T: OtpTransport + ?Sized> OtpTransport for Arc<T> {
    fn kind(&self) -> TransportKind {
        (**self).kind()
    }

    fn send(&self, session_id: &SessionId, destination: &str, otp: &OtpDigits) -> Result<(), DeliveryError> {
        (**self).send(session_id, destination, otp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReceipt {
    pub session_id: SessionId,
    pub kind: TransportKind,
    pub delivered_at: DateTime<Utc>,
}

/// One configured transport.
pub struct OtpGateway {
    transport: Box<dyn OtpTransport>,
}

impl OtpGateway {
    pub fn new(transport: impl OtpTransport + 'static) -> Self {
        OtpGateway {
            transport: Box::new(transport),
        }
    }

    pub fn kind(&self) -> TransportKind {
        self.transport.kind()
    }

    /// Sends a live key. The key itself is never modified here.
    pub fn deliver(
        &self,
        key: &OtpKey,
        destination: &str,
        now: DateTime<Utc>,
    ) -> Result<DeliveryReceipt, DeliveryError> {
        if key.state != OtpState::Live {
            return Err(DeliveryError::NotLive);
        }
        self.transport.send(&key.session_id, destination, &key.digits)?;
        tracing::debug!(session = %key.session_id, kind = ?self.kind(), "session key delivered");
        Ok(DeliveryReceipt {
            session_id: key.session_id.clone(),
            kind: self.kind(),
            delivered_at: now,
        })
    }
}
