#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};
use tuhr_server::{start, RunningServer, ServerConfig};

pub const ADMIN: (&str, &str) = ("admin", "admin-pw");
pub const WORKER: (&str, &str) = ("w1", "worker-pw");

pub fn config(dir: &Path) -> ServerConfig {
    let creds = dir.join("credentials.toml");
    std::fs::write(
        &creds,
        r#"
[[users]]
username = "admin"
password = "admin-pw"
role = "ADMIN"

[[users]]
username = "w1"
password = "worker-pw"
role = "WORKER"
start_location = { lat = 21.4225, lon = 39.8262 }
capacity = 3
"#,
    )
    .unwrap();
    let mut cfg = ServerConfig::new(dir.join("data"));
    cfg.telemetry_addr = ([127, 0, 0, 1], 0).into();
    cfg.api_addr = ([127, 0, 0, 1], 0).into();
    cfg.credentials_file = Some(creds);
    cfg.offline_scan_every = Duration::ZERO;
    cfg.plan_every = Duration::ZERO;
    cfg
}

pub async fn server(dir: &Path) -> RunningServer {
    start(config(dir)).await.expect("server starts")
}

pub struct Client {
    pub http: reqwest::Client,
    pub base: String,
}

impl Client {
    pub fn new(srv: &RunningServer) -> Self {
        Client {
            http: reqwest::Client::new(),
            base: format!("http://{}/api", srv.api_addr),
        }
    }

    pub async fn login(&self, who: (&str, &str)) -> String {
        let r = self
            .http
            .post(format!("{}/login", self.base))
            .json(&json!({"username": who.0, "password": who.1}))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 200, "login {}", who.0);
        r.json::<Value>().await.unwrap()["token"]
            .as_str()
            .unwrap()
            .to_owned()
    }

    pub async fn call(
        &self,
        method: reqwest::Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (u16, Value) {
        let mut req = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let r = req.send().await.unwrap();
        let status = r.status().as_u16();
        let text = r.text().await.unwrap();
        let v = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        (status, v)
    }

    pub async fn get(&self, path: &str, token: &str) -> (u16, Value) {
        self.call(reqwest::Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> (u16, Value) {
        self.call(reqwest::Method::POST, path, Some(token), Some(body)).await
    }
}

pub fn bin_json(i: usize, zone: &str) -> Value {
    json!({
        "bin_id": format!("bin-{i:03}"),
        "sensor_id": format!("s-{i:03}"),
        "location": {"lat": 21.42 + i as f64 * 0.001, "lon": 39.82},
        "zone_id": zone,
        "depth_cm": 100.0,
        "full_offset_cm": 10.0,
    })
}

/// Zone `zone-a` with sensors s-001..=s-00n.
pub async fn register(c: &Client, token: &str, n: usize) {
    let (s, _) = c
        .post("/zones", token, json!({"zone_id": "zone-a", "name": "Zone A"}))
        .await;
    assert_eq!(s, 201);
    for i in 1..=n {
        let (s, body) = c.post("/sensors", token, bin_json(i, "zone-a")).await;
        assert_eq!(s, 201, "{body}");
    }
}

/// One wire record for sensor `s-00i`.
pub fn record(i: usize, seq: u64, ts: &str, dist: f64, gas: f64) -> String {
    format!(
        r#"{{"v":1,"sid":"s-{i:03}","seq":{seq},"ts":"{ts}","dist_cm":{dist},"gas_ppm":{gas},"batt_pct":90}}"#
    )
}
