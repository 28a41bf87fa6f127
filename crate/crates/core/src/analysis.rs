//! Attacker models for the login scheme.
//!
//! Each model is simulated against a real [`AuthService`]: the attacker starts
//! sessions, submits clicks through the same path a browser uses, and the
//! server judges them. Empirical success rates are reported next to an exact
//! reference value.
//!
//! - `BlindGuess`: picks one of the four images and one of the nine cells at
//!   random on every level. Reference `(1/36)^3 = 1/46656`.
//! - `KnownImages`: always recognises the real image, guesses the cell.
//!   Reference `(1/9)^3 = 1/729`.
//! - `SessionObserver`: recorded the screen of one earlier successful login
//!   (which image was clicked and where) and learned that session's spent key.
//!   It keeps only the labeling statuses consistent with what it saw, then
//!   guesses the new key. Its reference is computed by exhaustive enumeration
//!   over the status hypotheses, fresh keys and guesses.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::auth::{
    AuthConfig, AuthService, ClickEvent, ClickOutcome, LoginOutcome, IMAGES_PER_LEVEL, LEVELS, MIN_DECOY_POOL,
};
use crate::grid::{GridCell, GridLabel, LabelingStatus, CELL_COUNT};
use crate::otp::{InProcessOutbox, OtpGateway, OtpStore};
use crate::vault::{ContentType, MasterKey, Vault};
use crate::ImageId;

/// Largest accepted trial count.
pub const MAX_TRIALS: u64 = 100_000_000;

/// Trials per independently seeded worker stream.
const CHUNK_TRIALS: u64 = 16_384;
/// Sweep finished sessions this often inside a worker.
const SWEEP_EVERY: u64 = 1_024;
const DECOYS_IN_SIMULATION: usize = MIN_DECOY_POOL + 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("{0} trials exceeds the budget of {MAX_TRIALS}")]
    OverBudget(u64),
    #[error("unknown attacker model {0:?}")]
    UnknownModel(String),
    #[error("simulation setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackerKind {
    BlindGuess,
    KnownImages,
    SessionObserver,
}

impl AttackerKind {
    pub const ALL: [AttackerKind; 3] = [
        AttackerKind::BlindGuess,
        AttackerKind::KnownImages,
        AttackerKind::SessionObserver,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackerKind::BlindGuess => "blind",
            AttackerKind::KnownImages => "known-images",
            AttackerKind::SessionObserver => "session-observer",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            AttackerKind::BlindGuess => "guesses image and cell uniformly at every level",
            AttackerKind::KnownImages => "knows the real images, guesses the cell",
            AttackerKind::SessionObserver => {
                "saw one earlier login on screen and its spent key; not the phone for this login"
            }
        }
    }
}

impl fmt::Display for AttackerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackerKind {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "blind" | "blind-guess" => Ok(AttackerKind::BlindGuess),
            "known-images" | "known" => Ok(AttackerKind::KnownImages),
            "session-observer" | "observer" => Ok(AttackerKind::SessionObserver),
            _ => Err(AnalysisError::UnknownModel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackerModel {
    pub kind: AttackerKind,
    pub trials: u64,
    pub seed: u64,
}

impl AttackerModel {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.trials == 0 {
            return Err(AnalysisError::NoTrials);
        }
        if self.trials > MAX_TRIALS {
            return Err(AnalysisError::OverBudget(self.trials));
        }
        Ok(())
    }
}

/// An exact probability `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Per-attempt success probability of the two memoryless models.
pub fn closed_form(kind: AttackerKind) -> Option<Ratio> {
    let cells = u64::from(CELL_COUNT);
    let images = IMAGES_PER_LEVEL as u64;
    let levels = u32::from(LEVELS);
    match kind {
        AttackerKind::BlindGuess => Some(Ratio::new(1, (images * cells).pow(levels))),
        AttackerKind::KnownImages => Some(Ratio::new(1, cells.pow(levels))),
        AttackerKind::SessionObserver => None,
    }
}

/// What a session observer saw at one level of an earlier successful login.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedLevel {
    pub image_id: ImageId,
    pub cell: GridCell,
    /// Digit of the spent key for that level.
    pub digit: GridLabel,
}

/// Statuses under which `cell` carries `digit`.
pub fn consistent_statuses(cell: GridCell, digit: GridLabel) -> Vec<LabelingStatus> {
    LabelingStatus::ALL
        .into_iter()
        .filter(|s| s.label_of(cell) == digit)
        .collect()
}

/// Exact success probability of the session observer, by enumeration.
///
/// Sums over every status hypothesis tuple consistent with the observation,
/// every fresh key and every guessed key, with the attacker picking a
/// hypothesis and a guess uniformly. `truth` holds the user's real statuses.
pub fn observer_oracle(observed: &[ObservedLevel], truth: &[LabelingStatus]) -> Ratio {
    assert_eq!(observed.len(), truth.len());
    let hypotheses: Vec<Vec<LabelingStatus>> = observed
        .iter()
        .map(|o| consistent_statuses(o.cell, o.digit))
        .collect();
    let levels = observed.len();
    let labels: Vec<GridLabel> = GridLabel::all().collect();
    let keys = tuples(&labels, levels);
    let hyp_tuples = product(&hypotheses);

    let mut hits: u64 = 0;
    let mut total: u64 = 0;
    for hyp in &hyp_tuples {
        for fresh in &keys {
            let needed: Vec<GridCell> = truth.iter().zip(fresh).map(|(s, d)| s.cell_of(*d)).collect();
            for guess in &keys {
                total += 1;
                let hit = hyp
                    .iter()
                    .zip(guess)
                    .zip(&needed)
                    .all(|((h, g), want)| h.cell_of(*g) == *want);
                hits += u64::from(hit);
            }
        }
    }
    Ratio::new(hits, total)
}

fn tuples<T: Copy>(items: &[T], len: usize) -> Vec<Vec<T>> {
    (0..len).fold(vec![Vec::new()], |acc, _| {
        acc.into_iter()
            .flat_map(|prefix| {
                items.iter().map(move |it| {
                    let mut next = prefix.clone();
                    next.push(*it);
                    next
                })
            })
            .collect()
    })
}

fn product<T: Copy>(sets: &[Vec<T>]) -> Vec<Vec<T>> {
    sets.iter().fold(vec![Vec::new()], |acc, set| {
        acc.into_iter()
            .flat_map(|prefix| {
                set.iter().map(move |it| {
                    let mut next = prefix.clone();
                    next.push(*it);
                    next
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub kind: AttackerKind,
    pub trials: u64,
    pub seed: u64,
    pub successes: u64,
    pub rate: f64,
    /// Exact reference probability.
    pub reference: Ratio,
    /// Binomial standard deviation of the rate at the reference probability.
    pub sigma: f64,
}

impl AttackReport {
    pub fn z_score(&self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        (self.rate - self.reference.value()) / self.sigma
    }

    pub fn within_sigmas(&self, k: f64) -> bool {
        (self.rate - self.reference.value()).abs() <= k * self.sigma
    }
}

/// A throwaway deployment with one registered victim.
struct Rig {
    auth: AuthService,
    outbox: Arc<InProcessOutbox>,
    username: &'static str,
}

const VICTIM: &str = "victim";

fn rig(statuses: &[LabelingStatus; LEVELS as usize], t0: DateTime<Utc>) -> Result<Rig, AnalysisError> {
    let setup = |e: &dyn fmt::Display| AnalysisError::Setup(e.to_string());
    let vault = Arc::new(Vault::in_memory(MasterKey::from_bytes([0x5a; 32])));
    for i in 0..DECOYS_IN_SIMULATION {
        vault
            .add_decoy(format!("decoy-{i}").as_bytes(), ContentType::Png)
            .map_err(|e| setup(&e))?;
    }
    let outbox = Arc::new(InProcessOutbox::new());
    let config = AuthConfig {
        lockout: None,
        ..AuthConfig::default()
    };
    let auth = AuthService::new(config, vault, OtpStore::default(), OtpGateway::new(outbox.clone()));
    let user = auth
        .register_user(VICTIM, "+10000000000", Default::default(), t0)
        .map_err(|e| setup(&e))?;
    for (level, status) in (1..=LEVELS).zip(statuses) {
        auth.attach_image_password(
            &user,
            level,
            format!("victim-{level}").as_bytes(),
            ContentType::Png,
            *status,
            t0,
        )
        .map_err(|e| setup(&e))?;
    }
    Ok(Rig {
        auth,
        outbox,
        username: VICTIM,
    })
}

impl Rig {
    fn victim_images(&self) -> Vec<ImageId> {
        let user = self.auth.user_by_name(self.username).expect("victim registered");
        user.passwords()
            .expect("victim finalized")
            .iter()
            .map(|p| p.image_id.clone())
            .collect()
    }

    /// Plays one login where `choose(level, images)` picks the click.
    fn attempt<R: Rng>(
        &self,
        now: DateTime<Utc>,
        server_rng: &mut R,
        mut choose: impl FnMut(usize, &[ImageId]) -> ClickEvent,
    ) -> Result<LoginOutcome, AnalysisError> {
        let started = self
            .auth
            .start_login(self.username, now, server_rng)
            .map_err(|e| AnalysisError::Setup(e.to_string()))?;
        let sid = started.session_id;
        // The attacker never sees the phone; drop the delivered key.
        self.outbox.take(&sid);
        let mut challenge = started.challenge;
        for level in 0..usize::from(LEVELS) {
            let click = choose(level, &challenge.images);
            match self.auth.submit_click(&sid, &click, now) {
                Ok(ClickOutcome::Next(next)) => challenge = next,
                Ok(ClickOutcome::FinalizeReady) => {}
                Err(e) => return Err(AnalysisError::Setup(e.to_string())),
            }
        }
        self.auth
            .finalize(&sid, now)
            .map_err(|e| AnalysisError::Setup(e.to_string()))
    }

    /// The legitimate user logs in once while the observer records the screen.
    fn observe<R: Rng>(
        &self,
        statuses: &[LabelingStatus; LEVELS as usize],
        now: DateTime<Utc>,
        server_rng: &mut R,
    ) -> Result<Vec<ObservedLevel>, AnalysisError> {
        let own = self.victim_images();
        let started = self
            .auth
            .start_login(self.username, now, server_rng)
            .map_err(|e| AnalysisError::Setup(e.to_string()))?;
        let sid = started.session_id;
        let key = self
            .outbox
            .take(&sid)
            .ok_or_else(|| AnalysisError::Setup("no key delivered".into()))?;
        let mut challenge = started.challenge;
        let mut observed = Vec::new();
        for (status, digit) in statuses.iter().zip(key.labels()) {
            let real = challenge
                .images
                .iter()
                .find(|id| own.contains(id))
                .cloned()
                .ok_or_else(|| AnalysisError::Setup("real image missing from challenge".into()))?;
            let cell = status.cell_of(digit);
            observed.push(ObservedLevel {
                image_id: real.clone(),
                cell,
                digit,
            });
            match self.auth.submit_click(&sid, &ClickEvent::at_cell(real, cell), now) {
                Ok(ClickOutcome::Next(next)) => challenge = next,
                Ok(ClickOutcome::FinalizeReady) => {}
                Err(e) => return Err(AnalysisError::Setup(e.to_string())),
            }
        }
        let outcome = self
            .auth
            .finalize(&sid, now)
            .map_err(|e| AnalysisError::Setup(e.to_string()))?;
        if outcome != LoginOutcome::Succeeded {
            return Err(AnalysisError::Setup("legitimate login failed".into()));
        }
        // The spent key is what the observer learns afterwards.
        Ok(observed)
    }
}

fn uniform_cell<R: Rng>(rng: &mut R) -> GridCell {
    GridCell::new(rng.gen_range(0..3), rng.gen_range(0..3)).expect("in range")
}

fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Statuses of the simulated victim, fixed by the seed.
pub fn victim_statuses(seed: u64) -> [LabelingStatus; LEVELS as usize] {
    let mut rng = chunk_rng(seed, u64::MAX);
    std::array::from_fn(|_| *LabelingStatus::ALL.choose(&mut rng).expect("non-empty"))
}

struct ChunkResult {
    trials: u64,
    successes: u64,
    /// Exact reference for this chunk's world, weighted by its trials.
    reference: Ratio,
}

/// Observer references keyed by what was seen; chunks often see the same thing.
type OracleCache = Mutex<HashMap<Vec<(GridCell, GridLabel)>, Ratio>>;

fn cached_oracle(cache: &OracleCache, seen: &[ObservedLevel], truth: &[LabelingStatus]) -> Ratio {
    let key: Vec<(GridCell, GridLabel)> = seen.iter().map(|o| (o.cell, o.digit)).collect();
    if let Some(r) = cache.lock().get(&key) {
        return *r;
    }
    let r = observer_oracle(seen, truth);
    cache.lock().insert(key, r);
    r
}

fn run_chunk(
    model: &AttackerModel,
    index: u64,
    trials: u64,
    cache: &OracleCache,
) -> Result<ChunkResult, AnalysisError> {
    let statuses = victim_statuses(model.seed);
    let t0 = DateTime::from_timestamp(1_700_000_000, 0).expect("valid timestamp");
    let rig = rig(&statuses, t0)?;
    let mut server_rng = chunk_rng(model.seed, 2 * index);
    let mut attacker_rng = chunk_rng(model.seed, 2 * index + 1);
    let known = rig.victim_images();

    let (reference, observation) = match model.kind {
        AttackerKind::SessionObserver => {
            let seen = rig.observe(&statuses, t0, &mut server_rng)?;
            (cached_oracle(cache, &seen, &statuses), Some(seen))
        }
        kind => (closed_form(kind).expect("memoryless model"), None),
    };
    let hypotheses: Option<Vec<Vec<LabelingStatus>>> = observation
        .as_ref()
        .map(|seen| seen.iter().map(|o| consistent_statuses(o.cell, o.digit)).collect());
    let observed_images: Option<Vec<ImageId>> =
        observation.as_ref().map(|seen| seen.iter().map(|o| o.image_id.clone()).collect());

    let mut successes = 0;
    for i in 0..trials {
        let now = t0 + Duration::seconds(i as i64 + 1);
        let rng = &mut attacker_rng;
        let outcome = rig.attempt(now, &mut server_rng, |level, images| match model.kind {
            AttackerKind::BlindGuess => {
                let image = images.choose(rng).expect("four images").clone();
                ClickEvent::at_cell(image, uniform_cell(rng))
            }
            AttackerKind::KnownImages => {
                let image = images.iter().find(|id| known.contains(id)).expect("real image shown").clone();
                ClickEvent::at_cell(image, uniform_cell(rng))
            }
            AttackerKind::SessionObserver => {
                let seen = observed_images.as_ref().expect("observer has a transcript");
                let image = images.iter().find(|id| seen.contains(id)).expect("real image shown").clone();
                let hyp = *hypotheses.as_ref().expect("observer has hypotheses")[level]
                    .choose(rng)
                    .expect("true status is always consistent");
                let guess = GridLabel::new(rng.gen_range(1..=CELL_COUNT)).expect("in range");
                ClickEvent::at_cell(image, hyp.cell_of(guess))
            }
        })?;
        successes += u64::from(outcome == LoginOutcome::Succeeded);
        if (i + 1) % SWEEP_EVERY == 0 {
            rig.auth.sweep(now);
        }
    }
    Ok(ChunkResult {
        trials,
        successes,
        reference,
    })
}

/// Runs `model.trials` simulated attacks and compares with the exact reference.
///
/// Trials are split into fixed-size chunks, each with its own deployment and
/// seeded streams, so the result depends only on the model, not on thread count.
pub fn simulate(model: &AttackerModel) -> Result<AttackReport, AnalysisError> {
    model.validate()?;
    let chunks = model.trials.div_ceil(CHUNK_TRIALS);
    let cache = OracleCache::default();
    let results: Vec<ChunkResult> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK_TRIALS.min(model.trials - c * CHUNK_TRIALS);
            run_chunk(model, c, n, &cache)
        })
        .collect::<Result<_, _>>()?;

    let successes = results.iter().map(|r| r.successes).sum();
    let reference = combine_references(&results);
    let p = reference.value();
    let n = model.trials as f64;
    Ok(AttackReport {
        kind: model.kind,
        trials: model.trials,
        seed: model.seed,
        successes,
        rate: successes as f64 / n,
        reference,
        sigma: (p * (1.0 - p) / n).sqrt(),
    })
}

/// Trial-weighted mean of the chunk references, kept exact when they agree.
fn combine_references(results: &[ChunkResult]) -> Ratio {
    let first = results[0].reference;
    if results.iter().all(|r| r.reference == first) {
        return first;
    }
    let total: u64 = results.iter().map(|r| r.trials).sum();
    let den = results.iter().fold(1u64, |l, r| l / gcd(l, r.reference.den) * r.reference.den);
    let num: u128 = results
        .iter()
        .map(|r| u128::from(r.reference.num) * u128::from(den / r.reference.den) * u128::from(r.trials))
        .sum();
    let den_total = u128::from(den) * u128::from(total);
    let g = {
        let (mut a, mut b) = (num, den_total);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a.max(1)
    };
    Ratio {
        num: (num / g) as u64,
        den: (den_total / g) as u64,
    }
}
