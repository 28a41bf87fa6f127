//! User registry and the registration and login state machines.
//!
//! Registration stores three image passwords, one per level, each with the
//! labeling status the user picked. Login is a three-level challenge: every
//! level shows the user's image for that level shuffled among three decoys,
//! and the user clicks the cell whose label equals that level's key digit.
//!
//! Clicks are recorded without being judged. Nothing the client sees before
//! [`AuthService::finalize`] depends on whether a click was right, and the
//! final failure is a single opaque outcome.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{expected_cell, map_click, GridCell, GridError, LabelingStatus};
use crate::otp::{OtpGateway, OtpStore};
use crate::vault::{ContentType, Owner, Requester, Vault, VaultError};
use crate::{ImageId, SessionId, UserId};

/// Challenge levels (click points) per login.
pub const LEVELS: u8 = 3;
/// Images shown per level.
pub const IMAGES_PER_LEVEL: usize = 4;
/// Decoys shown per level.
pub const DECOYS_PER_LEVEL: usize = IMAGES_PER_LEVEL - 1;
/// Smallest decoy pool a login may draw from.
pub const MIN_DECOY_POOL: usize = DECOYS_PER_LEVEL * LEVELS as usize;

const MAX_USERNAME: usize = 64;
const MAX_MOBILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockoutPolicy {
    /// Failed finalizations that trigger a lock.
    pub threshold: usize,
    /// Window the failures must fall in.
    pub window: Duration,
    /// How long the lock lasts, counted from the failure that triggered it.
    pub duration: Duration,
}

impl Default for LockoutPolicy {
    fn default() -> Self {
        LockoutPolicy {
            threshold: 3,
            window: Duration::minutes(15),
            duration: Duration::minutes(15),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthConfig {
    pub session_ttl: Duration,
    /// `None` disables lockout.
    pub lockout: Option<LockoutPolicy>,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            session_ttl: Duration::minutes(10),
            lockout: Some(LockoutPolicy::default()),
        }
    }
}

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("username must be 1-64 characters from [A-Za-z0-9_.-]")]
    InvalidUsername,
    #[error("mobile must be 1-64 printable characters")]
    InvalidMobile,
    #[error("username already taken")]
    DuplicateUsername,
    #[error("unknown user")]
    UnknownUser,
    #[error("level {0} outside 1..=3")]
    InvalidLevel(u8),
    #[error("level {0} already has an image")]
    LevelAlreadyAttached(u8),
    #[error(transparent)]
    Vault(#[from] VaultError),
}

/// Refusals of [`AuthService::start_login`].
///
/// Unknown users, unfinished registrations and internal failures all collapse
/// into `Unavailable` so callers cannot probe which usernames exist.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoginError {
    #[error("authentication unavailable")]
    Unavailable,
    #[error("account locked")]
    Locked { retry_after: Duration },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("unknown session")]
    NotFound,
    #[error("image is not part of the current challenge")]
    Protocol,
    #[error("invalid click: {0}")]
    InvalidClick(GridError),
    #[error("session is {0:?}")]
    WrongState(SessionState),
    #[error("all clicks recorded; finalize the session")]
    ClicksComplete,
    #[error("finalize needs {LEVELS} clicks, {0} recorded")]
    Incomplete(usize),
    #[error("session expired")]
    Expired,
    #[error("image not available to this session")]
    ImageNotFound,
}


/// One registered image password.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePassword {
    pub level: u8,
    pub image_id: ImageId,
    pub status: LabelingStatus,
}

#[derive(Debug, Clone)]
pub struct UserRecord {
    pub user_id: UserId,
    pub username: String,
    pub mobile: String,
    pub details: BTreeMap<String, String>,
    pub created_at: DateTime<Utc>,
    passwords: [Option<ImagePassword>; LEVELS as usize],
    serial: u64,
    registration_seconds: Option<f64>,
    login_seconds: Vec<f64>,
}

impl UserRecord {
    pub fn is_finalized(&self) -> bool {
        self.passwords.iter().all(Option::is_some)
    }

    /// The three passwords in level order, once registration is complete.
    pub fn passwords(&self) -> Option<[&ImagePassword; LEVELS as usize]> {
        let [a, b, c] = &self.passwords;
        Some([a.as_ref()?, b.as_ref()?, c.as_ref()?])
    }

    fn image_ids(&self) -> Vec<ImageId> {
        self.passwords.iter().flatten().map(|p| p.image_id.clone()).collect()
    }
}

/// Server-measured task durations for one user, in registration order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRecord {
    pub serial: u64,
    /// Seconds from account creation to the third image; `None` while incomplete.
    pub registration_seconds: Option<f64>,
    /// Seconds from session start to successful finalize, oldest first.
    pub login_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttachOutcome {
    pub image_id: ImageId,
    pub registration_complete: bool,
}

/// Four images shown at one level. Carries nothing that marks the real one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub level: u8,
    pub images: Vec<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartedLogin {
    pub session_id: SessionId,
    pub challenge: Challenge,
}

/// Click payload reported by the client, relative to the clicked image's box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub image_id: ImageId,
    pub x: f64,
    pub y: f64,
    pub rendered_w: f64,
    pub rendered_h: f64,
}

impl ClickEvent {
    /// A click in the middle of `cell` on a 300×300 rendering.
    pub fn at_cell(image_id: ImageId, cell: GridCell) -> Self {
        let (w, h) = (300.0, 300.0);
        let (x, y) = cell.center(w, h);
        ClickEvent {
            image_id,
            x,
            y,
            rendered_w: w,
            rendered_h: h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClickOutcome {
    Next(Challenge),
    FinalizeReady,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoginOutcome {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    AwaitingClicks,
    Succeeded,
    Failed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockoutStatus {
    Allowed,
    Locked { retry_after: Duration },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RecordedClick {
    image_id: ImageId,
    cell: GridCell,
}

#[derive(Debug)]
struct LoginSession {
    user_id: UserId,
    /// 1-based level awaiting a click; `LEVELS + 1` once all clicks are in.
    current_level: u8,
    challenges: Vec<Challenge>,
    clicks: Vec<RecordedClick>,
    state: SessionState,
    started_at: DateTime<Utc>,
    finished_at: Option<DateTime<Utc>>,
}

impl LoginSession {
    fn is_stale(&self, now: DateTime<Utc>, ttl: Duration) -> bool {
        now - self.started_at > ttl
    }

    /// Images the client has been shown so far.
    fn presented(&self) -> Vec<ImageId> {
        let shown = usize::from(self.current_level.min(LEVELS));
        self.challenges[..shown]
            .iter()
            .flat_map(|c| c.images.iter().cloned())
            .collect()
    }

    fn outcome_for_current(&self) -> ClickOutcome {
        match self.challenges.get(usize::from(self.current_level) - 1) {
            Some(c) => ClickOutcome::Next(c.clone()),
            None => ClickOutcome::FinalizeReady,
        }
    }
}

#[derive(Debug, Default)]
struct Registry {
    users: HashMap<UserId, UserRecord>,
    by_name: HashMap<String, UserId>,
    next_serial: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub sessions_expired: usize,
    pub sessions_removed: usize,
    pub keys_expired: usize,
}

pub struct AuthService {
    config: AuthConfig,
    vault: Arc<Vault>,
    otp: OtpStore,
    gateway: OtpGateway,
    registry: RwLock<Registry>,
    sessions: Mutex<HashMap<SessionId, Arc<Mutex<LoginSession>>>>,
    failures: Mutex<HashMap<UserId, Vec<DateTime<Utc>>>>,
}

fn valid_username(name: &str) -> bool {
    (1..=MAX_USERNAME).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

fn seconds(d: Duration) -> f64 {
    d.num_milliseconds().max(0) as f64 / 1000.0
}

impl AuthService {
    pub fn new(config: AuthConfig, vault: Arc<Vault>, otp: OtpStore, gateway: OtpGateway) -> Self {
        AuthService {
            config,
            vault,
            otp,
            gateway,
            registry: RwLock::new(Registry::default()),
            sessions: Mutex::new(HashMap::new()),
            failures: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &AuthConfig {
        &self.config
    }

    pub fn vault(&self) -> &Arc<Vault> {
        &self.vault
    }

    pub fn otp_store(&self) -> &OtpStore {
        &self.otp
    }

    pub fn register_user(
        &self,
        username: &str,
        mobile: &str,
        details: BTreeMap<String, String>,
        now: DateTime<Utc>,
    ) -> Result<UserId, RegistrationError> {
        if !valid_username(username) {
            return Err(RegistrationError::InvalidUsername);
        }
        let mobile = mobile.trim();
        if mobile.is_empty() || mobile.len() > MAX_MOBILE || mobile.chars().any(char::is_control) {
            return Err(RegistrationError::InvalidMobile);
        }
        let mut reg = self.registry.write();
        if reg.by_name.contains_key(username) {
            return Err(RegistrationError::DuplicateUsername);
        }
        reg.next_serial += 1;
        let user_id = UserId::random();
        let record = UserRecord {
            user_id: user_id.clone(),
            username: username.to_string(),
            mobile: mobile.to_string(),
            details,
            created_at: now,
            passwords: Default::default(),
            serial: reg.next_serial,
            registration_seconds: None,
            login_seconds: Vec::new(),
        };
        reg.by_name.insert(username.to_string(), user_id.clone());
        reg.users.insert(user_id.clone(), record);
        tracing::info!(user = %user_id, "user registered");
        Ok(user_id)
    }

    /// Seals `image` as the user's password for `level`.
    pub fn attach_image_password(
        &self,
        user_id: &UserId,
        level: u8,
        image: &[u8],
        content_type: ContentType,
        status: LabelingStatus,
        now: DateTime<Utc>,
    ) -> Result<AttachOutcome, RegistrationError> {
        if !(1..=LEVELS).contains(&level) {
            return Err(RegistrationError::InvalidLevel(level));
        }
        let mut reg = self.registry.write();
        let user = reg.users.get_mut(user_id).ok_or(RegistrationError::UnknownUser)?;
        let slot = &mut user.passwords[usize::from(level) - 1];
        if slot.is_some() {
            return Err(RegistrationError::LevelAlreadyAttached(level));
        }
        let sealed = self.vault.seal(image, Owner::User(user_id.clone()), content_type)?;
        *slot = Some(ImagePassword {
            level,
            image_id: sealed.image_id.clone(),
            status,
        });
        let complete = user.is_finalized();
        if complete && user.registration_seconds.is_none() {
            user.registration_seconds = Some(seconds(now - user.created_at));
        }
        Ok(AttachOutcome {
            image_id: sealed.image_id,
            registration_complete: complete,
        })
    }

    pub fn user(&self, user_id: &UserId) -> Option<UserRecord> {
        self.registry.read().users.get(user_id).cloned()
    }

    pub fn user_by_name(&self, username: &str) -> Option<UserRecord> {
        let reg = self.registry.read();
        reg.by_name.get(username).and_then(|id| reg.users.get(id)).cloned()
    }

    /// Reads one of the user's own images.
    pub fn user_image(&self, user_id: &UserId, image_id: &ImageId) -> Result<Vec<u8>, VaultError> {
        self.vault.open(image_id, Requester::Owner(&Owner::User(user_id.clone())))
    }

    pub fn check_lockout(&self, username: &str, now: DateTime<Utc>) -> LockoutStatus {
        let Some(user_id) = self.registry.read().by_name.get(username).cloned() else {
            return LockoutStatus::Allowed;
        };
        self.lockout_for(&user_id, now)
    }

    fn lockout_for(&self, user_id: &UserId, now: DateTime<Utc>) -> LockoutStatus {
        let Some(policy) = self.config.lockout else {
            return LockoutStatus::Allowed;
        };
        if policy.threshold == 0 {
            return LockoutStatus::Allowed;
        }
        let failures = self.failures.lock();
        let Some(times) = failures.get(user_id) else {
            return LockoutStatus::Allowed;
        };
        // A lock starts at any failure that completes `threshold` failures
        // inside the window, and lasts `duration` from there.
        let locked_until = times
            .windows(policy.threshold)
            .filter(|w| w[w.len() - 1] - w[0] <= policy.window)
            .map(|w| w[w.len() - 1] + policy.duration)
            .max();
        match locked_until {
            Some(until) if now < until => LockoutStatus::Locked {
                retry_after: until - now,
            },
            _ => LockoutStatus::Allowed,
        }
    }

    fn record_failure(&self, user_id: &UserId, now: DateTime<Utc>) {
        let Some(policy) = self.config.lockout else {
            return;
        };
        let mut failures = self.failures.lock();
        let times = failures.entry(user_id.clone()).or_default();
        let horizon = policy.window.max(policy.duration);
        times.retain(|t| now - *t <= horizon);
        times.push(now);
    }

    /// Opens a login session, issues and delivers its key, and returns the
    /// first challenge.
    pub fn start_login<R: Rng + ?Sized>(
        &self,
        username: &str,
        now: DateTime<Utc>,
        rng: &mut R,
    ) -> Result<StartedLogin, LoginError> {
        let (user_id, mobile, passwords) = {
            let reg = self.registry.read();
            let user = reg
                .by_name
                .get(username)
                .and_then(|id| reg.users.get(id))
                .ok_or(LoginError::Unavailable)?;
            let passwords = user.passwords().ok_or(LoginError::Unavailable)?.map(Clone::clone);
            (user.user_id.clone(), user.mobile.clone(), passwords)
        };
        if let LockoutStatus::Locked { retry_after } = self.lockout_for(&user_id, now) {
            return Err(LoginError::Locked { retry_after });
        }
        if self.vault.decoy_count() < MIN_DECOY_POOL {
            tracing::warn!(pool = self.vault.decoy_count(), "decoy pool too small for login");
            return Err(LoginError::Unavailable);
        }

        let own: Vec<ImageId> = passwords.iter().map(|p| p.image_id.clone()).collect();
        let mut challenges = Vec::with_capacity(usize::from(LEVELS));
        for (level, password) in (1..=LEVELS).zip(&passwords) {
            let mut images = self
                .vault
                .pick_decoys(&own, DECOYS_PER_LEVEL, rng)
                .map_err(|e| {
                    tracing::warn!(error = %e, "cannot build challenge");
                    LoginError::Unavailable
                })?;
            images.push(password.image_id.clone());
            images.shuffle(rng);
            challenges.push(Challenge { level, images });
        }

        let session_id = SessionId::random();
        let key = self.otp.generate(&session_id, now, rng).map_err(|_| LoginError::Unavailable)?;
        if let Err(e) = self.gateway.deliver(&key, &mobile, now) {
            tracing::warn!(session = %session_id, error = %e, "session key delivery failed");
            self.otp.forget(&session_id);
            return Err(LoginError::Unavailable);
        }

        let first = challenges[0].clone();
        let session = LoginSession {
            user_id,
            current_level: 1,
            challenges,
            clicks: Vec::with_capacity(usize::from(LEVELS)),
            state: SessionState::AwaitingClicks,
            started_at: now,
            finished_at: None,
        };
        self.sessions
            .lock()
            .insert(session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(StartedLogin {
            session_id,
            challenge: first,
        })
    }

    fn session(&self, session_id: &SessionId) -> Result<Arc<Mutex<LoginSession>>, SessionError> {
        self.sessions.lock().get(session_id).cloned().ok_or(SessionError::NotFound)
    }

    /// Checks the session is still open, expiring it if it is too old.
    fn ensure_open(&self, session_id: &SessionId, s: &mut LoginSession, now: DateTime<Utc>) -> Result<(), SessionError> {
        if s.state != SessionState::AwaitingClicks {
            return Err(SessionError::WrongState(s.state));
        }
        if s.is_stale(now, self.config.session_ttl) {
            s.state = SessionState::Expired;
            s.finished_at = Some(now);
            self.otp.forget(session_id);
            return Err(SessionError::Expired);
        }
        Ok(())
    }

    /// The challenge the session is waiting on. Repeated calls return the same images.
    pub fn current_challenge(&self, session_id: &SessionId, now: DateTime<Utc>) -> Result<ClickOutcome, SessionError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        self.ensure_open(session_id, &mut s, now)?;
        Ok(s.outcome_for_current())
    }

    /// Records a click for the current level without judging it.
    pub fn submit_click(
        &self,
        session_id: &SessionId,
        click: &ClickEvent,
        now: DateTime<Utc>,
    ) -> Result<ClickOutcome, SessionError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        self.ensure_open(session_id, &mut s, now)?;
        let idx = usize::from(s.current_level) - 1;
        let Some(challenge) = s.challenges.get(idx) else {
            return Err(SessionError::ClicksComplete);
        };
        if !challenge.images.contains(&click.image_id) {
            s.state = SessionState::Failed;
            s.finished_at = Some(now);
            // Burn the key: a protocol violation ends this attempt.
            let _ = self.otp.consume(session_id, now);
            return Err(SessionError::Protocol);
        }
        let cell = map_click(click.x, click.y, click.rendered_w, click.rendered_h)
            .map_err(SessionError::InvalidClick)?;
        s.clicks.push(RecordedClick {
            image_id: click.image_id.clone(),
            cell,
        });
        s.current_level += 1;
        Ok(s.outcome_for_current())
    }

    /// Spends the session key and judges all three clicks at once.
    pub fn finalize(&self, session_id: &SessionId, now: DateTime<Utc>) -> Result<LoginOutcome, SessionError> {
        let session = self.session(session_id)?;
        let mut s = session.lock();
        self.ensure_open(session_id, &mut s, now)?;
        if s.clicks.len() < usize::from(LEVELS) {
            return Err(SessionError::Incomplete(s.clicks.len()));
        }
        let digits = self.otp.consume(session_id, now).ok();
        let passwords = self
            .registry
            .read()
            .users
            .get(&s.user_id)
            .and_then(|u| u.passwords().map(|p| p.map(Clone::clone)));

        let succeeded = match (digits, passwords) {
            (Some(digits), Some(passwords)) => {
                // Evaluate every condition; no early exit on the first mismatch.
                s.clicks
                    .iter()
                    .zip(passwords.iter())
                    .zip(digits.labels())
                    .fold(true, |ok, ((click, pw), digit)| {
                        let right_image = click.image_id == pw.image_id;
                        let right_cell = click.cell == expected_cell(pw.status, digit);
                        ok & right_image & right_cell
                    })
            }
            _ => false,
        };

        s.finished_at = Some(now);
        if succeeded {
            s.state = SessionState::Succeeded;
            let elapsed = seconds(now - s.started_at);
            if let Some(user) = self.registry.write().users.get_mut(&s.user_id) {
                user.login_seconds.push(elapsed);
            }
            Ok(LoginOutcome::Succeeded)
        } else {
            s.state = SessionState::Failed;
            self.record_failure(&s.user_id, now);
            Ok(LoginOutcome::Failed)
        }
    }

    pub fn session_state(&self, session_id: &SessionId) -> Option<SessionState> {
        self.sessions.lock().get(session_id).map(|s| s.lock().state)
    }

    /// Decrypts an image the session has already presented.
    pub fn session_image(
        &self,
        session_id: &SessionId,
        image_id: &ImageId,
        now: DateTime<Utc>,
    ) -> Result<(Vec<u8>, ContentType), SessionError> {
        let session = self.session(session_id)?;
        let presented = {
            let s = session.lock();
            if s.state == SessionState::Expired || s.is_stale(now, self.config.session_ttl) {
                return Err(SessionError::Expired);
            }
            s.presented()
        };
        let content_type = self.vault.content_type(image_id).ok_or(SessionError::ImageNotFound)?;
        match self.vault.open(image_id, Requester::Challenge(&presented)) {
            Ok(bytes) => Ok((bytes, content_type)),
            Err(VaultError::NotFound | VaultError::Unauthorized) => Err(SessionError::ImageNotFound),
            Err(e) => {
                tracing::error!(image = %image_id, error = %e, "stored image unreadable");
                Err(SessionError::ImageNotFound)
            }
        }
    }

    /// Expires stale sessions, drops finished ones past the session TTL, and
    /// expires stale keys.
    pub fn sweep(&self, now: DateTime<Utc>) -> SweepReport {
        let ttl = self.config.session_ttl;
        let mut report = SweepReport::default();
        let mut removed = Vec::new();
        {
            let mut sessions = self.sessions.lock();
            sessions.retain(|sid, session| {
                let mut s = session.lock();
                if s.state == SessionState::AwaitingClicks && s.is_stale(now, ttl) {
                    s.state = SessionState::Expired;
                    s.finished_at = Some(now);
                    report.sessions_expired += 1;
                }
                let keep = match s.finished_at {
                    Some(done) if s.state != SessionState::AwaitingClicks => now - done <= ttl,
                    _ => true,
                };
                if !keep {
                    removed.push(sid.clone());
                }
                keep
            });
        }
        report.sessions_removed = removed.len();
        for sid in &removed {
            self.otp.forget(sid);
        }
        report.keys_expired = self.otp.sweep_expired(now);
        report
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    /// Per-user durations, ordered by registration.
    pub fn timings(&self) -> Vec<TimingRecord> {
        let reg = self.registry.read();
        let mut out: Vec<TimingRecord> = reg
            .users
            .values()
            .map(|u| TimingRecord {
                serial: u.serial,
                registration_seconds: u.registration_seconds,
                login_seconds: u.login_seconds.clone(),
            })
            .collect();
        out.sort_by_key(|r| r.serial);
        out
    }

    /// Image ids of every user image; used to check decoy hygiene.
    pub fn all_user_images(&self) -> Vec<ImageId> {
        self.registry.read().users.values().flat_map(UserRecord::image_ids).collect()
    }
}
