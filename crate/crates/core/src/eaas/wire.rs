//! JSON-over-HTTP binding of the service.
//!
//! `POST /v1/embed` takes `{account, shape: [h, w, c], images: [base64]}`,
//! each image being `h·w·c` little-endian f64 values in HWC order, and
//! returns `{features, query_count, cost, budget_remaining, defense}`.
//! `GET /v1/ledger/{account}` and `GET /v1/info` are read-only. Feature
//! values are sent with 8 significant decimal digits.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use ndarray::{Array2, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Response, Server};

use super::{EaasService, EmbeddingApi, LedgerReport, ServiceInfo};
use crate::encoder::{FeatureBatch, FeatureOrigin};
use crate::{Error, Result};

/// Significant decimal digits carried by the wire format.
pub const WIRE_DIGITS: usize = 8;

/// Rounds to the wire precision.
pub fn quantize(x: f64) -> f64 {
    format!("{:.*e}", WIRE_DIGITS - 1, x).parse().expect("formatted float parses")
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedRequest {
    account: String,
    shape: [usize; 3],
    images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbedResponse {
    features: Vec<Vec<f64>>,
    query_count: u64,
    cost: f64,
    budget_remaining: Option<u64>,
    defense: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ErrorBody {
    error: String,
    kind: String,
    #[serde(default)]
    account: Option<String>,
    #[serde(default)]
    used: Option<u64>,
    #[serde(default)]
    cap: Option<u64>,
    #[serde(default)]
    requested: Option<u64>,
}

fn encode_image(img: ndarray::ArrayView3<'_, f64>) -> String {
    let mut bytes = Vec::with_capacity(img.len() * 8);
    for x in img.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_images(req: &EmbedRequest) -> Result<Array4<f64>> {
    let [h, w, c] = req.shape;
    let per = h * w * c;
    let mut flat = Vec::with_capacity(per * req.images.len());
    for (i, s) in req.images.iter().enumerate() {
        let bytes = B64
            .decode(s)
            .map_err(|e| Error::precondition(format!("image {i}: bad base64: {e}")))?;
        if bytes.len() != per * 8 {
            return Err(Error::precondition(format!(
                "image {i} has {} bytes, shape needs {}",
                bytes.len(),
                per * 8
            )));
        }
        flat.extend(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))));
    }
    Array4::from_shape_vec((req.images.len(), h, w, c), flat).map_err(|e| Error::precondition(e.to_string()))
}

fn error_response(err: &Error) -> (u16, ErrorBody) {
    let mut body = ErrorBody {
        error: err.to_string(),
        ..Default::default()
    };
    let status = match err.root() {
        Error::Auth(a) => {
            body.kind = "auth".into();
            body.account = Some(a.clone());
            401
        }
        Error::Quota {
            account,
            used,
            cap,
            requested,
        } => {
            body.kind = "quota".into();
            body.account = Some(account.clone());
            body.used = Some(*used);
            body.cap = Some(*cap);
            body.requested = Some(*requested);
            429
        }
        Error::Precondition(_) | Error::Json(_) => {
            body.kind = "bad_request".into();
            400
        }
        _ => {
            body.kind = "internal".into();
            500
        }
    };
    (status, body)
}

fn json_response(status: u16, bytes: Vec<u8>) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    Response::from_data(bytes).with_status_code(status).with_header(header)
}

fn handle(service: &EaasService, method: &Method, url: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
    match (method, url) {
        (Method::Post, "/v1/embed") => {
            let req: EmbedRequest = serde_json::from_slice(body)?;
            let images = decode_images(&req)?;
            let batch = service.query(&req.account, images.view())?;
            let ledger = service.ledger_report(&req.account)?;
            let resp = EmbedResponse {
                features: batch
                    .vectors
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|&x| quantize(x)).collect())
                    .collect(),
                query_count: ledger.query_count,
                cost: ledger.cost_dollars,
                budget_remaining: ledger.budget_remaining,
                defense: batch.defense_applied,
            };
            Ok((200, serde_json::to_vec(&resp)?))
        }
        (Method::Get, "/v1/info") => Ok((200, serde_json::to_vec(&service.info())?)),
        (Method::Get, path) if path.starts_with("/v1/ledger/") => {
            let account = &path["/v1/ledger/".len()..];
            Ok((200, serde_json::to_vec(&service.ledger_report(account)?)?))
        }
        _ => Ok((
            404,
            serde_json::to_vec(&ErrorBody {
                error: format!("no route for {method} {url}"),
                kind: "not_found".into(),
                ..Default::default()
            })?,
        )),
    }
}

/// A running server; dropping it stops the workers.
pub struct ServerHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `service` on `addr` (use port 0 for an ephemeral port).
pub fn serve(service: Arc<EaasService>, addr: &str, workers: usize) -> Result<ServerHandle> {
    let server = Server::http(addr).map_err(|e| Error::Remote(format!("cannot bind {addr}: {e}")))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Remote("server is not bound to an IP address".into()))?;
    let server = Arc::new(server);
    let workers = (0..workers.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let service = Arc::clone(&service);
            std::thread::spawn(move || {
                while let Ok(mut req) = server.recv() {
                    let mut body = Vec::new();
                    let (status, bytes) = match req.as_reader().read_to_end(&mut body) {
                        Err(e) => (400, serde_json::to_vec(&ErrorBody {
                            error: e.to_string(),
                            kind: "bad_request".into(),
                            ..Default::default()
                        })
                        .expect("error body serializes")),
                        Ok(_) => match handle(&service, req.method(), req.url(), &body) {
                            Ok(ok) => ok,
                            Err(e) => {
                                let (status, b) = error_response(&e);
                                (status, serde_json::to_vec(&b).expect("error body serializes"))
                            }
                        },
                    };
                    debug!("{} {} -> {status}", req.method(), req.url());
                    let resp = json_response(status, bytes);
                    if let Err(e) = req.respond(resp) {
                        warn!("failed to send response: {e}");
                    }
                }
            })
        })
        .collect();
    Ok(ServerHandle {
        server,
        addr: bound,
        workers,
    })
}

/// Remote client for one account.
#[derive(Clone, Debug)]
pub struct HttpClient {
    base: String,
    account: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base_url: &str, account: &str) -> Self {
        HttpClient {
            base: base_url.trim_end_matches('/').to_string(),
            account: account.to_string(),
            agent: ureq::AgentBuilder::new().build(),
        }
    }

    fn decode_error(status: u16, body: &str) -> Error {
        match serde_json::from_str::<ErrorBody>(body) {
            Ok(b) => match b.kind.as_str() {
                "auth" => Error::Auth(b.account.unwrap_or_default()),
                "quota" => Error::Quota {
                    account: b.account.unwrap_or_default(),
                    used: b.used.unwrap_or_default(),
                    cap: b.cap.unwrap_or_default(),
                    requested: b.requested.unwrap_or_default(),
                },
                "bad_request" => Error::precondition(b.error),
                _ => Error::Remote(format!("HTTP {status}: {}", b.error)),
            },
            Err(_) => Error::Remote(format!("HTTP {status}: {body}")),
        }
    }

    fn call(&self, req: ureq::Request, body: Option<serde_json::Value>) -> Result<String> {
        let res = match body {
            Some(b) => req.send_json(b),
            None => req.call(),
        };
        match res {
            Ok(r) => r.into_string().map_err(|e| Error::Remote(e.to_string())),
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                Err(Self::decode_error(code, &body))
            }
            Err(e) => Err(Error::Remote(e.to_string())),
        }
    }
}

impl EmbeddingApi for HttpClient {
    fn embed(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        let (_, h, w, c) = images.dim();
        let req = EmbedRequest {
            account: self.account.clone(),
            shape: [h, w, c],
            images: images.axis_iter(Axis(0)).map(encode_image).collect(),
        };
        let text = self.call(
            self.agent.post(&format!("{}/v1/embed", self.base)),
            Some(serde_json::to_value(&req)?),
        )?;
        let resp: EmbedResponse = serde_json::from_str(&text)?;
        let dim = match resp.features.first() {
            Some(r) => r.len(),
            None => self.info()?.feature_dim,
        };
        let n = resp.features.len();
        let flat: Vec<f64> = resp.features.into_iter().flatten().collect();
        let vectors = Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::Remote(format!("ragged features: {e}")))?;
        FeatureBatch::new(vectors, FeatureOrigin::Eaas, resp.defense)
    }

    fn ledger(&self) -> Result<LedgerReport> {
        let text = self.call(self.agent.get(&format!("{}/v1/ledger/{}", self.base, self.account)), None)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn info(&self) -> Result<ServiceInfo> {
        let text = self.call(self.agent.get(&format!("{}/v1/info", self.base)), None)?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl crate::encoder::FeatureExtractor for HttpClient {
    fn extract(&self, images: ArrayView4<'_, f64>) -> Result<FeatureBatch> {
        self.embed_all(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_keeps_eight_digits() {
        assert_eq!(quantize(0.123456789123), 0.12345679);
        assert_eq!(quantize(-1234.56789), -1234.5679);
        assert_eq!(quantize(0.0), 0.0);
        assert_eq!(quantize(quantize(3.14159265358)), quantize(3.14159265358));
    }
}
