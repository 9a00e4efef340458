//! In-process stand-in for the embedding service, backed by the linear model.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use dreamfield::guidance::wire::TensorPayload;
use dreamfield::guidance::LinearEmbedding;
use ndarray::ArrayView3;
use tiny_http::{Header, Method, Response, Server};

#[derive(Clone, Debug, Default)]
pub struct StubOptions {
    /// Answer this many requests with `fail_status` before serving normally.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Serve this many requests normally, then answer `fail_status` forever.
    pub fail_after: Option<usize>,
    /// Image-gradient responses carry a NaN.
    pub nan_gradient: bool,
    /// Constant image and text embeddings instead of the linear model.
    pub fixed: Option<(Vec<f32>, Vec<f32>)>,
}

pub struct Stub {
    pub url: String,
    pub model: Arc<LinearEmbedding>,
    pub requests: Arc<AtomicUsize>,
    server: Arc<Server>,
    worker: Option<JoinHandle<()>>,
}

impl Stub {
    pub fn start(model: LinearEmbedding, options: StubOptions) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind stub"));
        let port = server.server_addr().to_ip().expect("tcp listener").port();
        let model = Arc::new(model);
        let requests = Arc::new(AtomicUsize::new(0));
        let worker = {
            let (server, model, requests) = (server.clone(), model.clone(), requests.clone());
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = Vec::new();
                    let _ = req.as_reader().read_to_end(&mut body);
                    let failing = n < options.fail_first || options.fail_after.is_some_and(|k| n >= k);
                    let resp = if failing {
                        Response::from_data(b"busy".to_vec()).with_status_code(options.fail_status)
                    } else {
                        handle(&model, &options, req.method(), req.url(), &body)
                    };
                    let _ = req.respond(resp);
                }
            })
        };
        Stub { url: format!("http://127.0.0.1:{port}"), model, requests, server, worker: Some(worker) }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn error(status: u16, msg: &str) -> Reply {
    Response::from_data(msg.as_bytes().to_vec()).with_status_code(status)
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Reply {
    Response::from_data(TensorPayload::new(shape, data).unwrap().encode())
        .with_header(Header::from_bytes("content-type", "application/octet-stream").unwrap())
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' if i + 2 < bytes.len() => {
                out.push(u8::from_str_radix(&s[i + 1..i + 3], 16).unwrap_or(b'?'));
                i += 2;
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn images(model: &LinearEmbedding, body: &[u8]) -> Result<TensorPayload, Reply> {
    let p = TensorPayload::decode(body).map_err(|e| error(400, &e.to_string()))?;
    let r = model.resolution;
    match p.shape[..] {
        [_, h, w, 3] if h == r && w == r => Ok(p),
        _ => Err(error(400, &format!("expected [B,{r},{r},3], got {:?}", p.shape))),
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn handle(model: &LinearEmbedding, opts: &StubOptions, method: &Method, url: &str, body: &[u8]) -> Reply {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let res = model.resolution;
    let dim = model.dim();
    match (method, path) {
        (Method::Get, "/v1/health") => Response::from_data(b"ok".to_vec()),
        (Method::Get, "/v1/info") => Response::from_data(
            format!(r#"{{"model":"linear-stub","resolution":{res},"embedding_dim":{dim}}}"#).into_bytes(),
        ),
        (Method::Post, "/v1/embed_text") => {
            let req: serde_json::Value = match serde_json::from_slice(body) {
                Ok(v) => v,
                Err(e) => return error(400, &e.to_string()),
            };
            let captions: Vec<String> = req["captions"]
                .as_array()
                .map(|a| a.iter().filter_map(|c| c.as_str().map(String::from)).collect())
                .unwrap_or_default();
            if captions.is_empty() {
                return error(400, "empty caption list");
            }
            let mut data = Vec::new();
            for c in &captions {
                match &opts.fixed {
                    Some((_, h)) => data.extend(h),
                    None => data.extend(to_f32(model.embed_text(c))),
                }
            }
            let d = data.len() / captions.len();
            tensor(vec![captions.len(), d], data)
        }
        (Method::Post, "/v1/embed_image") => {
            let p = match images(model, body) {
                Ok(p) => p,
                Err(r) => return r,
            };
            let mut data = Vec::new();
            for chunk in p.data.chunks(res * res * 3) {
                match &opts.fixed {
                    Some((g, _)) => data.extend(g),
                    None => {
                        let view = ArrayView3::from_shape((res, res, 3), chunk).unwrap();
                        data.extend(to_f32(model.embed_image(view).unwrap()));
                    }
                }
            }
            let d = data.len() / p.shape[0];
            tensor(vec![p.shape[0], d], data)
        }
        (Method::Post, "/v1/image_grad") => {
            let caption = query
                .split('&')
                .find_map(|kv| kv.strip_prefix("caption="))
                .map(percent_decode)
                .unwrap_or_default();
            let p = match images(model, body) {
                Ok(p) if p.shape[0] == 1 => p,
                Ok(_) => return error(400, "image_grad takes a single image"),
                Err(r) => return r,
            };
            let (loss, mut grad) = match &opts.fixed {
                Some((g, h)) => {
                    let dot: f64 = g.iter().zip(h).map(|(&a, &b)| a as f64 * b as f64).sum();
                    (-dot, vec![0.0f32; p.data.len()])
                }
                None => {
                    let image = ArrayView3::from_shape((res, res, 3), &p.data[..]).unwrap().mapv(f64::from);
                    let text = model.embed_text(&caption);
                    let r = model.loss_and_gradient(image.view(), &text).unwrap();
                    (r.loss, r.image_gradient.iter().map(|&x: &f64| x as f32).collect())
                }
            };
            if opts.nan_gradient {
                grad[0] = f32::NAN;
            }
            tensor(p.shape.clone(), grad)
                .with_header(Header::from_bytes("x-loss", format!(r#"{{"loss": {loss}}}"#)).unwrap())
        }
        _ => error(404, "no such endpoint"),
    }
}
