use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::remote::{decode_png_frame, EvaluateRequest, EvaluateResponse};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockReply {
    pub verdict: String,
    pub suggestion: Option<String>,
}

impl MockReply {
    pub fn accept() -> Self {
        Self {
            verdict: "Accept".into(),
            suggestion: None,
        }
    }

    pub fn reject() -> Self {
        Self {
            verdict: "Reject".into(),
            suggestion: None,
        }
    }

    pub fn reject_with(suggestion: &str) -> Self {
        Self {
            verdict: "Reject".into(),
            suggestion: Some(suggestion.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MockPolicy {
    AlwaysAccept,
    AlwaysReject,
    /// Replies in order; the last reply repeats once the list is used up.
    Scripted(Vec<MockReply>),
}

impl MockPolicy {
    fn reply(&self, index: usize) -> MockReply {
        match self {
            MockPolicy::AlwaysAccept => MockReply::accept(),
            MockPolicy::AlwaysReject => MockReply::reject(),
            MockPolicy::Scripted(list) => list
                .get(index)
                .or(list.last())
                .cloned()
                .unwrap_or_else(MockReply::reject),
        }
    }
}

#[derive(Default)]
struct Shared {
    served: usize,
    requests: Vec<EvaluateRequest>,
}

/// In-process stub of the `/evaluate` endpoint. Stops when dropped.
pub struct MockCriticServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    shared: Arc<Mutex<Shared>>,
    thread: Option<JoinHandle<()>>,
}

fn validate(body: &str) -> Result<EvaluateRequest, String> {
    let req: EvaluateRequest = serde_json::from_str(body).map_err(|e| format!("invalid JSON body: {e}"))?;
    if req.mode != "binary" && req.mode != "suggestive" {
        return Err(format!("unknown mode {:?}", req.mode));
    }
    if req.frames.is_empty() {
        return Err("no frames".into());
    }
    for (k, f) in req.frames.iter().enumerate() {
        let bytes = BASE64
            .decode(f)
            .map_err(|e| format!("frame {k} is not valid base64: {e}"))?;
        decode_png_frame(&bytes).map_err(|e| format!("frame {k}: {e}"))?;
    }
    Ok(req)
}

impl MockCriticServer {
    /// Binds `127.0.0.1:port`; port 0 picks a free one.
    pub fn start(port: u16, policy: MockPolicy) -> io::Result<Self> {
        let server = tiny_http::Server::http(("127.0.0.1", port)).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("mock server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let shared = Arc::new(Mutex::new(Shared::default()));
        let thread = {
            let server = Arc::clone(&server);
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let (status, body) = Self::handle(&mut request, &policy, &shared);
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                        .expect("static header");
                    let response = tiny_http::Response::from_string(body)
                        .with_status_code(status)
                        .with_header(header);
                    if let Err(e) = request.respond(response) {
                        log::warn!("mock critic failed to respond: {e}");
                    }
                }
            })
        };
        Ok(Self {
            server,
            addr,
            shared,
            thread: Some(thread),
        })
    }

    fn handle(request: &mut tiny_http::Request, policy: &MockPolicy, shared: &Mutex<Shared>) -> (u16, String) {
        let error = |reason: String| serde_json::json!({ "error": reason }).to_string();
        if request.url() != "/evaluate" {
            return (404, error(format!("no route {}", request.url())));
        }
        if *request.method() != tiny_http::Method::Post {
            return (405, error("use POST".into()));
        }
        let mut body = String::new();
        if let Err(e) = request.as_reader().read_to_string(&mut body) {
            return (400, error(format!("unreadable body: {e}")));
        }
        let req = match validate(&body) {
            Ok(r) => r,
            Err(reason) => return (400, error(reason)),
        };
        let mut shared = shared.lock().expect("mock state lock");
        let reply = policy.reply(shared.served);
        shared.served += 1;
        shared.requests.push(req);
        let resp = EvaluateResponse {
            verdict: Some(reply.verdict),
            suggestion: reply.suggestion,
        };
        (200, serde_json::to_string(&resp).expect("response serializes"))
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Number of well-formed requests answered so far.
    pub fn served(&self) -> usize {
        self.shared.lock().expect("mock state lock").served
    }

    pub fn requests(&self) -> Vec<EvaluateRequest> {
        self.shared.lock().expect("mock state lock").requests.clone()
    }

    /// Blocks the calling thread until the server is stopped from elsewhere.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockCriticServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
