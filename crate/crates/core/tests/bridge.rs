//! The HTTP client against a small in-process mock service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use lea_core::bridge::*;
use lea_core::config::BridgeConfig;
use lea_core::env::{CachedEnv, Environment};
use lea_core::{Error, ItemId};
use serde_json::{json, Value};

const DIM: usize = 4;
const MAX_TOKENS: usize = 3;

fn key_num(k: &Value) -> f64 {
    k.as_str().unwrap()[1..].parse().unwrap()
}

fn route(method: &str, path: &str, body: &str) -> (u16, String) {
    let bad = |status: u16, cat: &str, msg: &str| {
        (status, json!({"category": cat, "message": msg}).to_string())
    };
    let req: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    match (method, path) {
        ("GET", "/healthz") => (200, "ok".into()),
        ("GET", "/v1/meta") => (
            200,
            json!({"model_name": "mock", "hidden_dim": DIM, "max_sequence_tokens": MAX_TOKENS, "adapter_loaded": true})
                .to_string(),
        ),
        ("POST", "/v1/state") => {
            let Some(h) = req["history"].as_array() else {
                return bad(400, "invalid-input", "history missing");
            };
            if h.is_empty() {
                return bad(400, "invalid-input", "empty history");
            }
            if h.len() > MAX_TOKENS {
                return bad(413, "too-long", "history too long");
            }
            let s: f64 = h.iter().map(key_num).sum();
            let state: Vec<f64> = (0..DIM).map(|j| s * (j as f64 + 1.0) + h.len() as f64 / 3.0).collect();
            (200, json!({ "state": state }).to_string())
        }
        ("POST", "/v1/reward") => {
            let raw = if req["action"] == "i1" { 0.0 } else { -1.0 - key_num(&req["action"]) };
            let value = 1.0 / (1.0 + (-raw as f64).exp());
            (200, json!({"raw": raw, "value": value}).to_string())
        }
        ("POST", "/v1/augment") => {
            let c = req["candidates"].as_array().map_or(0, Vec::len);
            if c != 5 {
                return bad(400, "invalid-input", "need 5 candidates");
            }
            (200, json!({"selected_index": 4}).to_string())
        }
        ("POST", "/v1/tokenize_item") => {
            let seed = req["seed"].as_u64().unwrap_or(0) as f64;
            let emb: Vec<f64> = (0..DIM).map(|j| seed + j as f64 * 0.125).collect();
            (200, json!({ "embedding": emb }).to_string())
        }
        _ => bad(404, "not-found", path),
    }
}

fn serve(stream: TcpStream) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut out = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut parts = line.split_whitespace();
        let (method, path) = (
            parts.next().unwrap_or("").to_string(),
            parts.next().unwrap_or("").to_string(),
        );
        let mut len = 0usize;
        loop {
            let mut h = String::new();
            reader.read_line(&mut h).unwrap();
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body).unwrap();
        let (status, text) = route(&method, &path, &String::from_utf8(body).unwrap());
        let resp = format!(
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{text}",
            text.len()
        );
        if out.write_all(resp.as_bytes()).is_err() {
            return;
        }
    }
}

fn mock() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for s in listener.incoming().flatten() {
            thread::spawn(move || serve(s));
        }
    });
    format!("http://{addr}")
}

fn keys(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i}")).collect()
}

fn connect(url: &str) -> BridgeEnv {
    let cfg = BridgeConfig {
        url: url.to_string(),
        timeout_ms: 5_000,
        template_id: "default".into(),
    };
    BridgeEnv::connect(&cfg, &keys(10)).unwrap()
}

#[test]
fn meta_is_echoed_and_stable() {
    let url = mock();
    let c = BridgeClient::new(&url, std::time::Duration::from_secs(5));
    assert!(c.healthy());
    let a = c.meta().unwrap();
    assert_eq!(a.hidden_dim, DIM);
    assert_eq!(a, c.meta().unwrap());
}

#[test]
fn states_rewards_and_selection() {
    let env = connect(&mock());
    assert_eq!(env.state_dim(), DIM);
    let h = [ItemId(2), ItemId(3)];
    let s = env.state_of(&h).unwrap();
    assert_eq!(s, env.state_of(&h).unwrap());
    assert_ne!(s, env.state_of(&h[..1]).unwrap());
    let r = env.reward_of(&h, ItemId(1)).unwrap();
    assert_eq!((r.raw, r.value), (Some(0.0), 0.5));
    let (a, b) = (
        env.reward_of(&h, ItemId(1)).unwrap(),
        env.reward_of(&h, ItemId(4)).unwrap(),
    );
    assert!(a.value > b.value);
    let list = [ItemId(0), ItemId(1), ItemId(2), ItemId(3), ItemId(4)];
    assert_eq!(env.select(&h, &list).unwrap(), 4);
    let cached = CachedEnv::new(env);
    assert_eq!(cached.states(&[&h, &h]).unwrap().len(), 2);
}

#[test]
fn service_errors_keep_status_and_category() {
    let env = connect(&mock());
    match env.state_of(&[]) {
        Err(Error::Bridge { status, message }) => {
            assert_eq!(status, 400);
            assert!(message.starts_with("invalid-input"));
        }
        other => panic!("expected a bridge error, got {other:?}"),
    }
    let long = [ItemId(1); MAX_TOKENS + 1];
    assert!(matches!(
        env.state_of(&long),
        Err(Error::Bridge { status: 413, .. })
    ));
    assert!(env.state_of(&[ItemId(99)]).is_err());
    let req = AugmentRequest {
        history: vec!["i1".into()],
        candidates: keys(6),
        template_id: "default".into(),
    };
    assert!(env.client.augment(&req).is_err());
}

#[test]
fn unreachable_service_is_a_bridge_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let cfg = BridgeConfig {
        url,
        timeout_ms: 2_000,
        template_id: "default".into(),
    };
    let err = BridgeEnv::connect(&cfg, &keys(3)).err().unwrap();
    assert_eq!(err.category(), "bridge");
}

#[test]
fn tokenize_is_deterministic_per_seed() {
    let c = BridgeClient::new(&mock(), std::time::Duration::from_secs(5));
    let req = TokenizeRequest {
        text: "track is titled x".into(),
        iters: 0,
        lr: 5e-3,
        seed: 7,
    };
    assert_eq!(
        c.tokenize_item(&req).unwrap(),
        c.tokenize_item(&req).unwrap()
    );
    assert!(c
        .tokenize_item(&TokenizeRequest {
            text: " ".into(),
            ..req
        })
        .is_err());
}

#[test]
fn wire_messages_round_trip() {
    let m = RewardRequest {
        history: keys(3),
        action: "i7".into(),
        template_id: "t".into(),
    };
    let back: RewardRequest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    assert_eq!(back, m);
    let s = StateResponse {
        state: vec![0.1 + 0.2, -1e-300, 123456.789],
    };
    let back: StateResponse = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}
