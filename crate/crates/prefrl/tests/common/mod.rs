#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};

use prefrl::config::{ExperimentConfig, Method};
use prefrl_core::policy::PpoConfig;
use prefrl_core::reward_model::TrainConfig;
use prefrl_core::sampler::SamplerConfig;

/// What the mock endpoint saw.
#[derive(Debug, Clone)]
pub struct Seen {
    pub authorization: Option<String>,
    pub body: String,
}

type Handler = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 chat-completions stand-in. `handler` gets the running
/// request index and the request body.
pub struct MockEndpoint {
    pub base_url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
}

impl MockEndpoint {
    pub fn start(handler: impl Fn(usize, &str) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = seen.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (handler, log) = (handler.clone(), log.clone());
                std::thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        MockEndpoint { base_url, seen }
    }

    pub fn requests(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Seen>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut out = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let (mut length, mut authorization) = (0usize, None);
        loop {
            let mut header = String::new();
            if reader.read_line(&mut header).unwrap_or(0) == 0 {
                return;
            }
            let header = header.trim_end();
            if header.is_empty() {
                break;
            }
            let (name, value) = header.split_once(':').unwrap_or((header, ""));
            match name.to_ascii_lowercase().as_str() {
                "content-length" => length = value.trim().parse().unwrap(),
                "authorization" => authorization = Some(value.trim().to_owned()),
                _ => {}
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
        let body = String::from_utf8(body).unwrap();
        let index = {
            let mut log = log.lock().unwrap();
            log.push(Seen { authorization, body: body.clone() });
            log.len() - 1
        };
        let (status, reply) = handler(index, &body);
        let response = format!(
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{reply}",
            reply.len()
        );
        if out.write_all(response.as_bytes()).is_err() {
            return;
        }
    }
}

/// A chat-completions response whose content is `text`.
pub fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}).to_string()
}

/// The user message of a request body.
pub fn user_message(body: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    v.pointer("/messages/1/content").unwrap().as_str().unwrap().to_owned()
}

/// Small and fast: random-policy sampling and a few thousand PPO steps.
pub fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        pairs: 40,
        seeds: vec![0, 1],
        methods: vec![Method::Predictor, Method::Original],
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.sampler.mix = SamplerConfig { random_fraction: 1.0, checkpoint_budget: 0, checkpoint_interval: 0 };
    c.reward_model = TrainConfig { hidden_dim: 8, epochs: 20, ..TrainConfig::default() };
    c.ppo = PpoConfig {
        hidden_dim: 8,
        steps_per_update: 512,
        total_env_steps: 2000,
        eval_interval: 1000,
        eval_episodes: 4,
        ..PpoConfig::default()
    };
    c.oracle.endpoint.base_delay_ms = 1;
    c.oracle.endpoint.max_delay_ms = 4;
    c
}
