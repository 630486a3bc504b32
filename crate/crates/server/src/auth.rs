//! Password hashing, bearer-token sessions and the credentials file.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use pbkdf2::pbkdf2_hmac;
use rand::RngCore;
use serde::Deserialize;
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use tuhr_core::domain::{Role, WorkerProfile};
use tuhr_core::geo::GeoPoint;
use tuhr_core::store::UserRecord;

pub const PBKDF2_ITERATIONS: u32 = 60_000;
const SALT_LEN: usize = 16;
const HASH_LEN: usize = 32;
pub const DEFAULT_IDLE: Duration = Duration::from_secs(8 * 3600);

/// `pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>`
pub fn hash_password(password: &str) -> String {
    let mut salt = [0u8; SALT_LEN];
    rand::rng().fill_bytes(&mut salt);
    hash_with(password, &salt, PBKDF2_ITERATIONS)
}

fn hash_with(password: &str, salt: &[u8], iterations: u32) -> String {
    let mut out = [0u8; HASH_LEN];
    pbkdf2_hmac::<Sha256>(password.as_bytes(), salt, iterations, &mut out);
    format!(
        "pbkdf2-sha256${iterations}${}${}",
        hex::encode(salt),
        hex::encode(out)
    )
}

/// Constant-time check of `password` against a stored hash.
pub fn verify_password(password: &str, stored: &str) -> bool {
    let mut parts = stored.split('$');
    let (Some("pbkdf2-sha256"), Some(iter), Some(salt), Some(hash), None) = (
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
        parts.next(),
    ) else {
        return false;
    };
    let (Ok(iterations), Ok(salt), Ok(expected)) =
        (iter.parse::<u32>(), hex::decode(salt), hex::decode(hash))
    else {
        return false;
    };
    if iterations == 0 || expected.is_empty() {
        return false;
    }
    let mut out = vec![0u8; expected.len()];
    pbkdf2_hmac::<Sha256>(password.as_bytes(), &salt, iterations, &mut out);
    out.ct_eq(&expected).into()
}

/// Burn the same work as a real verification so unknown users cannot be
/// told apart by timing.
pub fn dummy_verify(password: &str) {
    static DUMMY: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    let stored = DUMMY.get_or_init(|| hash_with("", &[0u8; SALT_LEN], PBKDF2_ITERATIONS));
    let _ = verify_password(password, stored);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Principal {
    pub username: String,
    pub role: Role,
}

struct Session {
    username: String,
    last_seen: Instant,
}

/// Opaque tokens with an idle expiry.
pub struct Sessions {
    idle: Duration,
    map: Mutex<HashMap<String, Session>>,
}

impl Sessions {
    pub fn new(idle: Duration) -> Self {
        Sessions {
            idle,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn idle(&self) -> Duration {
        self.idle
    }

    /// Issue a fresh 256-bit token.
    pub fn issue(&self, username: &str) -> String {
        let mut bytes = [0u8; 32];
        rand::rng().fill_bytes(&mut bytes);
        let token = hex::encode(bytes);
        let mut map = self.map.lock().unwrap();
        let now = Instant::now();
        map.retain(|_, s| now.duration_since(s.last_seen) < self.idle);
        map.insert(
            token.clone(),
            Session {
                username: username.to_owned(),
                last_seen: now,
            },
        );
        token
    }

    /// Username behind a live token; refreshes its idle timer.
    pub fn touch(&self, token: &str) -> Option<String> {
        let mut map = self.map.lock().unwrap();
        let now = Instant::now();
        let s = map.get_mut(token)?;
        if now.duration_since(s.last_seen) >= self.idle {
            map.remove(token);
            return None;
        }
        s.last_seen = now;
        Some(s.username.clone())
    }

    pub fn revoke_user(&self, username: &str) {
        self.map
            .lock()
            .unwrap()
            .retain(|_, s| s.username != username);
    }
}

#[derive(Debug, Error)]
pub enum CredentialsError {
    #[error("cannot read credentials file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad credentials file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("user {0}: needs exactly one of password or password_hash")]
    Password(String),
    #[error("user {0}: {1}")]
    Invalid(String, String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CredentialsFile {
    #[serde(default)]
    users: Vec<CredentialEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CredentialEntry {
    username: String,
    #[serde(default)]
    password: Option<String>,
    #[serde(default)]
    password_hash: Option<String>,
    role: Role,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    start_location: Option<GeoPoint>,
    #[serde(default)]
    capacity: Option<u32>,
}

/// Parse a TOML credentials file:
///
/// ```toml
/// [[users]]
/// username = "admin"
/// password = "change-me"
/// role = "ADMIN"
/// ```
pub fn parse_credentials(text: &str) -> Result<Vec<UserRecord>, CredentialsError> {
    let file: CredentialsFile = toml::from_str(text)?;
    file.users
        .into_iter()
        .map(|u| {
            let password_hash = match (u.password, u.password_hash) {
                (Some(p), None) => hash_password(&p),
                (None, Some(h)) => h,
                _ => return Err(CredentialsError::Password(u.username)),
            };
            let profile = WorkerProfile {
                name: u.name.unwrap_or_else(|| u.username.clone()),
                worker_id: u.username,
                start_location: u.start_location.unwrap_or(GeoPoint { lat: 0.0, lon: 0.0 }),
                capacity: u.capacity.unwrap_or(5),
                role: u.role,
            };
            profile
                .validate()
                .map_err(|e| CredentialsError::Invalid(profile.worker_id.clone(), e.to_string()))?;
            Ok(UserRecord {
                profile,
                password_hash,
            })
        })
        .collect()
}

pub fn load_credentials(path: &Path) -> Result<Vec<UserRecord>, CredentialsError> {
    parse_credentials(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_round_trip() {
        let h = hash_password("s3cret");
        assert!(h.starts_with("pbkdf2-sha256$60000$"));
        assert!(verify_password("s3cret", &h));
        assert!(!verify_password("s3cret ", &h));
        assert!(!verify_password("s3cret", "plain"));
        assert_ne!(hash_password("s3cret"), h);
    }

    #[test]
    fn tokens_expire_when_idle() {
        let s = Sessions::new(Duration::from_millis(30));
        let t = s.issue("ali");
        assert_eq!(t.len(), 64);
        assert_eq!(s.touch(&t).as_deref(), Some("ali"));
        std::thread::sleep(Duration::from_millis(40));
        assert_eq!(s.touch(&t), None);
        assert_eq!(s.touch("nope"), None);
    }

    #[test]
    fn credentials_file() {
        let users = parse_credentials(
            r#"
            [[users]]
            username = "admin"
            password = "pw"
            role = "ADMIN"

            [[users]]
            username = "w1"
            password_hash = "pbkdf2-sha256$1$00$00"
            role = "WORKER"
            name = "Worker One"
            start_location = { lat = 21.42, lon = 39.82 }
            capacity = 3
            "#,
        )
        .unwrap();
        assert_eq!(users.len(), 2);
        assert!(verify_password("pw", &users[0].password_hash));
        assert_eq!(users[1].profile.capacity, 3);
        assert_eq!(users[1].profile.role, Role::Worker);
        assert!(parse_credentials("[[users]]\nusername='x'\nrole='ADMIN'\n").is_err());
    }
}
