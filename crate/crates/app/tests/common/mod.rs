//! In-process server and a scripted HTTP client.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ccpauth::{http, AppState, RngSource};
use ccpauth_core::auth::AuthConfig;
use ccpauth_core::otp::FileDrop;
use ccpauth_core::{expected_cell, ContentType, GridCell, GridLabel, LabelingStatus, MasterKey, OtpDigits, OtpGateway, OtpStore, Vault};
use ccpauth_core::AuthService;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use ureq::Agent;

pub const DECOYS: usize = 12;

pub struct Server {
    pub base: String,
    pub state: AppState,
    pub otp_dir: tempfile::TempDir,
    agent: Agent,
}

impl Server {
    pub fn start(config: AuthConfig, seed: u64) -> Server {
        let otp_dir = tempfile::tempdir().unwrap();
        let vault = Arc::new(Vault::in_memory(MasterKey::from_bytes([0x42; 32])));
        for i in 0..DECOYS {
            vault.add_decoy(format!("decoy image {i}").as_bytes(), ContentType::Jpeg).unwrap();
        }
        let auth = AuthService::new(
            config,
            vault,
            OtpStore::default(),
            OtpGateway::new(FileDrop::new(otp_dir.path())),
        );
        let state = AppState::new(auth, RngSource::seeded(seed));
        let router = http::router(state.clone());
        let (tx, rx) = mpsc::channel::<SocketAddr>();
        thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, router).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        let agent: Agent = Agent::config_builder().http_status_as_error(false).build().into();
        Server {
            base: format!("http://{addr}"),
            state,
            otp_dir,
            agent,
        }
    }

    pub fn default_seeded(seed: u64) -> Server {
        Server::start(AuthConfig::default(), seed)
    }

    /// Puts the deterministic rng back to `seed`.
    pub fn reseed(&self, seed: u64) {
        if let RngSource::Seeded(rng) = &*self.state.rng {
            *rng.lock() = ChaCha8Rng::seed_from_u64(seed);
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// POST with a JSON body; returns status and raw body.
    pub fn post(&self, path: &str, body: &Value) -> (u16, String) {
        self.post_raw(path, body.to_string().as_bytes())
    }

    pub fn post_raw(&self, path: &str, body: &[u8]) -> (u16, String) {
        let mut resp = self
            .agent
            .post(&self.url(path))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    pub fn get(&self, path: &str) -> (u16, Option<String>, Vec<u8>) {
        let mut resp = self.agent.get(&self.url(path)).call().unwrap();
        let status = resp.status().as_u16();
        let ct = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        (status, ct, resp.body_mut().read_to_vec().unwrap())
    }

    pub fn json(&self, path: &str, body: &Value) -> (u16, Value) {
        let (status, text) = self.post(path, body);
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    /// Registers a user with one image per level; returns user and image ids.
    pub fn register(&self, username: &str, statuses: [LabelingStatus; 3]) -> (String, Vec<String>) {
        let (status, body) = self.json(
            "/api/users",
            &json!({ "username": username, "mobile": "+15550100", "details": { "email": format!("{username}@example.org") } }),
        );
        assert_eq!(status, 201, "{body}");
        let user_id = body["user_id"].as_str().unwrap().to_string();
        let mut images = Vec::new();
        for (i, st) in statuses.iter().enumerate() {
            let level = i + 1;
            let bytes = image_bytes(username, level);
            let (status, body) = self.json(
                &format!("/api/users/{user_id}/images"),
                &json!({
                    "level": level,
                    "status": st.as_str(),
                    "content_type": "image/png",
                    "image_base64": B64.encode(bytes),
                }),
            );
            assert_eq!(status, 201, "{body}");
            assert_eq!(body["registration_complete"].as_bool().unwrap_or(false), level == 3);
            images.push(body["image_id"].as_str().unwrap().to_string());
        }
        (user_id, images)
    }

    pub fn start_login(&self, username: &str) -> (u16, Value) {
        self.json("/api/sessions", &json!({ "username": username }))
    }

    pub fn click(&self, sid: &str, image_id: &str, cell: GridCell) -> (u16, String) {
        let (x, y) = cell.center(300.0, 300.0);
        self.post(
            &format!("/api/sessions/{sid}/clicks"),
            &json!({ "image_id": image_id, "x": x, "y": y, "rendered_w": 300.0, "rendered_h": 300.0 }),
        )
    }

    pub fn finalize(&self, sid: &str) -> (u16, Value) {
        let mut resp = self
            .agent
            .post(&self.url(&format!("/api/sessions/{sid}/finalize")))
            .send_empty()
            .unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    /// The key the file transport dropped for `sid`.
    pub fn otp(&self, sid: &str) -> OtpDigits {
        read_otp(self.otp_dir.path(), sid)
    }
}

pub fn read_otp(dir: &Path, sid: &str) -> OtpDigits {
    let text = std::fs::read_to_string(dir.join(format!("otp-{sid}.txt"))).unwrap();
    assert!(text.ends_with('\n') && text.len() == 4, "{text:?}");
    text.trim_end().parse().unwrap()
}

/// Distinct, non-empty bytes standing in for an uploaded picture.
pub fn image_bytes(username: &str, level: usize) -> Vec<u8> {
    let mut b = b"\x89PNG\r\n\x1a\n".to_vec();
    b.extend(format!("{username}-level-{level}").bytes());
    b
}

/// How a scripted login departs from the correct one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    WrongImage(usize),
    WrongCell(usize),
}

/// Logs in over HTTP following the delivered key, applying `mutation`.
pub fn scripted_login(
    server: &Server,
    username: &str,
    images: &[String],
    statuses: [LabelingStatus; 3],
    mutation: Mutation,
) -> String {
    let (status, body) = server.start_login(username);
    assert_eq!(status, 201, "{body}");
    let sid = body["session_id"].as_str().unwrap().to_string();
    let otp = server.otp(&sid);
    let mut challenge = body;
    for level in 0..3 {
        assert_eq!(challenge["level"].as_u64(), Some(level as u64 + 1));
        let shown: Vec<String> = challenge["images"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        assert_eq!(shown.len(), 4);
        assert!(shown.contains(&images[level]));
        let digit = otp.labels()[level];
        let mut image = images[level].clone();
        let mut cell = expected_cell(statuses[level], digit);
        match mutation {
            Mutation::WrongImage(l) if l == level => {
                image = shown.iter().find(|i| **i != images[level]).unwrap().clone();
            }
            Mutation::WrongCell(l) if l == level => {
                let other = GridLabel::new(digit.value() % 9 + 1).unwrap();
                cell = expected_cell(statuses[level], other);
            }
            _ => {}
        }
        let (status, text) = server.click(&sid, &image, cell);
        assert_eq!(status, 200, "{text}");
        challenge = serde_json::from_str(&text).unwrap();
    }
    assert_eq!(challenge, json!({ "finalize_ready": true }));
    let (status, result) = server.finalize(&sid);
    assert_eq!(status, 200);
    result["result"].as_str().unwrap().to_string()
}

pub const GOLDEN: [LabelingStatus; 3] = [
    LabelingStatus::LeftToRight,
    LabelingStatus::RightToLeft,
    LabelingStatus::TopToBottom,
];
