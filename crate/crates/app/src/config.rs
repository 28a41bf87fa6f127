//! Environment configuration and the shared state built from it.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use ccpauth_core::auth::{AuthConfig, MIN_DECOY_POOL};
use ccpauth_core::otp::{ConsoleEcho, FileDrop, OtpTransport, WebhookPost};
use ccpauth_core::{AuthService, MasterKey, OtpGateway, OtpStore, Vault};
use chrono::Duration;
use parking_lot::Mutex;
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportConfig {
    Console,
    File(PathBuf),
    Webhook(String),
}

#[derive(Debug, Clone)]
pub struct Config {
    pub bind_addr: SocketAddr,
    pub master_key: MasterKey,
    /// `None` keeps the vault in memory.
    pub vault_path: Option<PathBuf>,
    pub decoy_dir: Option<PathBuf>,
    pub otp_ttl: Duration,
    pub transport: TransportConfig,
    /// Fixed seed for challenges and keys. Reproducible runs only; never in production.
    pub rng_seed: Option<u64>,
    pub auth: AuthConfig,
}

impl Config {
    pub fn from_env() -> anyhow::Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Reads settings through `get`, treating blank values as unset.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let get = |k: &str| get(k).map(|v| v.trim().to_string()).filter(|v| !v.is_empty());

        let bind_addr = get("BIND_ADDR")
            .unwrap_or_else(|| "127.0.0.1:8080".into())
            .parse()
            .context("BIND_ADDR")?;
        let master_key = MasterKey::parse(&get("MASTER_KEY").context("MASTER_KEY is required")?)
            .context("MASTER_KEY")?;
        let otp_ttl = match get("OTP_TTL_SECONDS") {
            Some(v) => {
                let secs: i64 = v.parse().context("OTP_TTL_SECONDS")?;
                if secs <= 0 {
                    bail!("OTP_TTL_SECONDS must be positive");
                }
                Duration::seconds(secs)
            }
            None => ccpauth_core::otp::default_otp_ttl(),
        };
        let transport = match get("OTP_TRANSPORT").as_deref().unwrap_or("console") {
            "console" => TransportConfig::Console,
            "file" => TransportConfig::File(get("OTP_FILE_DIR").context("OTP_FILE_DIR is required for the file transport")?.into()),
            "webhook" => TransportConfig::Webhook(
                get("OTP_WEBHOOK_URL").context("OTP_WEBHOOK_URL is required for the webhook transport")?,
            ),
            other => bail!("OTP_TRANSPORT must be console, file or webhook, not {other:?}"),
        };
        let rng_seed = get("AUTH_RNG_SEED").map(|v| v.parse()).transpose().context("AUTH_RNG_SEED")?;

        Ok(Config {
            bind_addr,
            master_key,
            vault_path: Some(get("VAULT_PATH").unwrap_or_else(|| "vault".into()).into()),
            decoy_dir: get("DECOY_DIR").map(PathBuf::from),
            otp_ttl,
            transport,
            rng_seed,
            auth: AuthConfig::default(),
        })
    }
}

/// Randomness for challenges and keys.
#[derive(Debug)]
pub enum RngSource {
    Os,
    Seeded(Box<Mutex<ChaCha8Rng>>),
}

impl RngSource {
    pub fn seeded(seed: u64) -> Self {
        RngSource::Seeded(Box::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))))
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut dyn rand::RngCore) -> T) -> T {
        match self {
            RngSource::Os => f(&mut OsRng),
            RngSource::Seeded(rng) => f(&mut *rng.lock()),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub auth: Arc<AuthService>,
    pub rng: Arc<RngSource>,
}

impl AppState {
    pub fn new(auth: AuthService, rng: RngSource) -> Self {
        AppState {
            auth: Arc::new(auth),
            rng: Arc::new(rng),
        }
    }

    /// Opens the vault, seeds the decoy pool on first start and wires the transport.
    pub fn from_config(cfg: &Config) -> anyhow::Result<Self> {
        let vault = match &cfg.vault_path {
            Some(dir) => Vault::open_dir(dir, cfg.master_key.clone())
                .with_context(|| format!("opening vault at {}", dir.display()))?,
            None => Vault::in_memory(cfg.master_key.clone()),
        };
        if let Some(dir) = &cfg.decoy_dir {
            if vault.decoy_count() == 0 {
                let n = vault
                    .ingest_decoys(dir)
                    .with_context(|| format!("ingesting decoys from {}", dir.display()))?;
                tracing::info!(count = n, dir = %dir.display(), "decoys ingested");
            } else {
                tracing::info!(pool = vault.decoy_count(), "decoy pool present; skipping ingestion");
            }
        }
        if vault.decoy_count() < MIN_DECOY_POOL {
            tracing::warn!(
                pool = vault.decoy_count(),
                needed = MIN_DECOY_POOL,
                "decoy pool too small; logins will be refused"
            );
        }
        let transport: Arc<dyn OtpTransport> = match &cfg.transport {
            TransportConfig::Console => Arc::new(ConsoleEcho::stderr()),
            TransportConfig::File(dir) => {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                Arc::new(FileDrop::new(dir))
            }
            TransportConfig::Webhook(url) => Arc::new(WebhookPost::new(url.clone())),
        };
        let auth = AuthService::new(
            cfg.auth,
            Arc::new(vault),
            OtpStore::new(cfg.otp_ttl),
            OtpGateway::new(transport),
        );
        let rng = match cfg.rng_seed {
            Some(seed) => {
                tracing::warn!(seed, "deterministic rng enabled; for testing only");
                RngSource::seeded(seed)
            }
            None => RngSource::Os,
        };
        Ok(AppState::new(auth, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn cfg(pairs: &[(&str, &str)]) -> anyhow::Result<Config> {
        let env: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Config::from_lookup(|k| env.get(k).cloned())
    }

    const KEY: &str = "000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f";

    #[test]
    fn master_key_is_required() {
        assert!(cfg(&[]).is_err());
        let c = cfg(&[("MASTER_KEY", KEY)]).unwrap();
        assert_eq!(c.transport, TransportConfig::Console);
        assert_eq!(c.otp_ttl, Duration::seconds(120));
        assert_eq!(c.bind_addr.port(), 8080);
    }

    #[test]
    fn transports_need_their_destination() {
        assert!(cfg(&[("MASTER_KEY", KEY), ("OTP_TRANSPORT", "file")]).is_err());
        assert!(cfg(&[("MASTER_KEY", KEY), ("OTP_TRANSPORT", "sms")]).is_err());
        let c = cfg(&[("MASTER_KEY", KEY), ("OTP_TRANSPORT", "webhook"), ("OTP_WEBHOOK_URL", "http://x/y")]).unwrap();
        assert_eq!(c.transport, TransportConfig::Webhook("http://x/y".into()));
    }

    #[test]
    fn ttl_must_be_positive() {
        assert!(cfg(&[("MASTER_KEY", KEY), ("OTP_TTL_SECONDS", "0")]).is_err());
        let c = cfg(&[("MASTER_KEY", KEY), ("OTP_TTL_SECONDS", "30")]).unwrap();
        assert_eq!(c.otp_ttl, Duration::seconds(30));
    }

    #[test]
    fn decoys_are_ingested_only_into_an_empty_pool() {
        let vault_dir = tempfile::tempdir().unwrap();
        let decoys = tempfile::tempdir().unwrap();
        for i in 0..9 {
            std::fs::write(decoys.path().join(format!("d{i}.png")), [i as u8 + 1; 16]).unwrap();
        }
        let mut c = cfg(&[("MASTER_KEY", KEY)]).unwrap();
        c.vault_path = Some(vault_dir.path().into());
        c.decoy_dir = Some(decoys.path().into());
        assert_eq!(AppState::from_config(&c).unwrap().auth.vault().decoy_count(), 9);
        std::fs::write(decoys.path().join("extra.png"), [42u8; 16]).unwrap();
        assert_eq!(AppState::from_config(&c).unwrap().auth.vault().decoy_count(), 9);
    }
}
