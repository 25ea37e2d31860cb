//! Out-of-process critic over TCP.
//!
//! Frame: `u32` LE header length, a JSON header, then the image as raw `f32`
//! LE values in row-major, channel-interleaved order. Connections are
//! persistent and pooled; the pool never exceeds `max_in_flight`.

use crate::error::{Error, Result};
use crate::guidance::{Conditioning, Critic};
use crate::raster::Image;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

const MAX_HEADER: usize = 1 << 20;
const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Header {
    Denoise {
        width: usize,
        height: usize,
        channels: usize,
        t: f32,
        guidance_scale: f32,
        weights: Vec<f32>,
        prompts: Vec<String>,
    },
    Epsilon {
        width: usize,
        height: usize,
        channels: usize,
    },
    Error {
        message: String,
    },
}

impl Header {
    fn payload_len(&self) -> usize {
        match self {
            Header::Denoise { width, height, channels, .. } | Header::Epsilon { width, height, channels } => width * height * channels,
            Header::Error { .. } => 0,
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, header: &Header, payload: &[f32]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Protocol(e.to_string()))?;
    let mut buf = Vec::with_capacity(4 + json.len() + payload.len() * 4);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. Malformed framing is a protocol error; socket failures
/// stay I/O errors so the caller can retry them.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Header, Vec<f32>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_HEADER {
        return Err(Error::Protocol(format!("header length {len} out of range")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Protocol(format!("bad header: {e}")))?;
    let n = header.payload_len();
    if n > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload of {n} values is too large")));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let payload = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header, payload))
}

pub fn quantize(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub address: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            address: "127.0.0.1:7860".into(),
            timeout_ms: 30_000,
            retries: 3,
            max_in_flight: 4,
        }
    }
}

struct Pool {
    idle: Vec<TcpStream>,
    in_flight: usize,
}

/// Client side of the critic protocol.
pub struct RemoteCritic {
    addr: SocketAddr,
    timeout: Duration,
    retries: u32,
    max_in_flight: usize,
    pool: Mutex<Pool>,
    slot_freed: Condvar,
}

impl RemoteCritic {
    pub fn new(config: &RemoteConfig) -> Result<Self> {
        use std::net::ToSocketAddrs;
        let addr = config
            .address
            .to_socket_addrs()
            .map_err(|e| Error::config(format!("critic address {:?}: {e}", config.address)))?
            .next()
            .ok_or_else(|| Error::config(format!("critic address {:?} did not resolve", config.address)))?;
        if config.max_in_flight == 0 || config.timeout_ms == 0 {
            return Err(Error::config("critic max_in_flight and timeout_ms must be positive"));
        }
        Ok(RemoteCritic {
            addr,
            timeout: Duration::from_millis(config.timeout_ms),
            retries: config.retries,
            max_in_flight: config.max_in_flight,
            pool: Mutex::new(Pool { idle: Vec::new(), in_flight: 0 }),
            slot_freed: Condvar::new(),
        })
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn acquire(&self) -> Option<TcpStream> {
        let mut pool = self.pool.lock().unwrap_or_else(|e| e.into_inner());
        while pool.in_flight >= self.max_in_flight {
            pool = self.slot_freed.wait(pool).unwrap_or_else(|e| e.into_inner());
        }
        pool.in_flight += 1;
        pool.idle.pop()
    }

    fn release(&self, conn: Option<TcpStream>) {
        let mut pool = self.pool.lock().unwrap_or_else(|e| e.into_inner());
        pool.in_flight -= 1;
        if let Some(c) = conn {
            pool.idle.push(c);
        }
        self.slot_freed.notify_one();
    }

    fn connect(&self) -> Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        s.set_read_timeout(Some(self.timeout))?;
        s.set_write_timeout(Some(self.timeout))?;
        s.set_nodelay(true)?;
        Ok(s)
    }

    fn exchange(&self, conn: &mut TcpStream, header: &Header, payload: &[f32], shape: (usize, usize, usize)) -> Result<Image> {
        write_frame(conn, header, payload)?;
        let (reply, data) = read_frame(conn)?;
        match reply {
            Header::Epsilon { width, height, channels } => {
                if (width, height, channels) != shape {
                    return Err(Error::Protocol(format!(
                        "critic replied {width}x{height}x{channels}, expected {}x{}x{}",
                        shape.0, shape.1, shape.2
                    )));
                }
                Image::from_data(width, height, channels, data.into_iter().map(f64::from).collect())
            }
            Header::Error { message } => Err(Error::Guidance { message, retriable: true }),
            Header::Denoise { .. } => Err(Error::Protocol("critic replied with a request frame".into())),
        }
    }
}

impl Critic for RemoteCritic {
    fn denoise(&self, noisy: &Image, t: f64, cond: &Conditioning<'_>) -> Result<Image> {
        let header = Header::Denoise {
            width: noisy.width,
            height: noisy.height,
            channels: noisy.channels,
            t: t as f32,
            guidance_scale: cond.guidance_scale as f32,
            weights: quantize(cond.weights),
            prompts: cond.prompts.to_vec(),
        };
        let payload = quantize(&noisy.data);
        let shape = (noisy.width, noisy.height, noisy.channels);
        let mut conn = self.acquire();
        let mut last = String::new();
        for attempt in 0..=self.retries {
            let mut stream = match conn.take() {
                Some(s) => s,
                None => match self.connect() {
                    Ok(s) => s,
                    Err(e) => {
                        last = e.to_string();
                        tracing::warn!(attempt, error = %last, "critic connect failed");
                        continue;
                    }
                },
            };
            match self.exchange(&mut stream, &header, &payload, shape) {
                Ok(img) => {
                    self.release(Some(stream));
                    return Ok(img);
                }
                Err(Error::Protocol(m)) => {
                    self.release(None);
                    return Err(Error::Protocol(m));
                }
                Err(e) => {
                    last = e.to_string();
                    tracing::warn!(attempt, error = %last, "critic request failed");
                }
            }
        }
        self.release(None);
        Err(Error::Guidance {
            message: format!("critic at {} failed after {} attempts: {last}", self.addr, self.retries + 1),
            retriable: true,
        })
    }
}

/// Serves a critic over the frame protocol. The conditioning embedding on
/// the server side is the received weight vector.
pub struct CriticServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl CriticServer {
    pub fn spawn(listener: TcpListener, critic: Arc<dyn Critic>) -> Result<Self> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let critic = critic.clone();
                        let flag = flag.clone();
                        std::thread::spawn(move || serve_connection(stream, critic.as_ref(), &flag));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                    Err(_) => break,
                }
            }
        });
        Ok(CriticServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for CriticServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_connection(mut stream: TcpStream, critic: &dyn Critic, stop: &AtomicBool) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    while !stop.load(Ordering::Relaxed) {
        let (header, payload) = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(_) => return,
        };
        let reply = handle_request(header, payload, critic);
        let ok = match reply {
            Ok(img) => write_frame(
                &mut stream,
                &Header::Epsilon {
                    width: img.width,
                    height: img.height,
                    channels: img.channels,
                },
                &quantize(&img.data),
            ),
            Err(e) => write_frame(&mut stream, &Header::Error { message: e.to_string() }, &[]),
        };
        if ok.is_err() {
            return;
        }
    }
}

fn handle_request(header: Header, payload: Vec<f32>, critic: &dyn Critic) -> Result<Image> {
    let Header::Denoise {
        width,
        height,
        channels,
        t,
        guidance_scale,
        weights,
        prompts,
    } = header
    else {
        return Err(Error::Protocol("expected a denoise request".into()));
    };
    let noisy = Image::from_data(width, height, channels, payload.into_iter().map(f64::from).collect())?;
    let weights: Vec<f64> = weights.into_iter().map(f64::from).collect();
    let cond = Conditioning {
        embedding: &weights,
        weights: &weights,
        prompts: &prompts,
        guidance_scale: f64::from(guidance_scale),
        camera: None,
    };
    critic.denoise(&noisy, f64::from(t), &cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{DiffusionSchedule, PointMassCritic};

    #[test]
    fn frame_round_trip() {
        let h = Header::Denoise {
            width: 2,
            height: 1,
            channels: 3,
            t: 0.25,
            guidance_scale: 7.5,
            weights: vec![0.5, 0.5],
            prompts: vec!["a".into(), "b".into()],
        };
        let payload = [1.0f32, -2.0, 3.5, 0.0, 1e-8, 4.0];
        let mut buf = Vec::new();
        write_frame(&mut buf, &h, &payload).unwrap();
        let (h2, p2) = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(h, h2);
        assert_eq!(p2, payload);
    }

    #[test]
    fn truncated_and_garbage_frames() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Header::Epsilon { width: 2, height: 2, channels: 1 }, &[0.0; 4]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_frame(&mut buf.as_slice()), Err(Error::Io(_))));
        let bad = [3u8, 0, 0, 0, b'x', b'y', b'z'];
        assert!(matches!(read_frame(&mut &bad[..]), Err(Error::Protocol(_))));
        let zero = [0u8; 4];
        assert!(matches!(read_frame(&mut &zero[..]), Err(Error::Protocol(_))));
    }

    #[test]
    fn loopback_matches_in_process_on_quantized_inputs() {
        let s = DiffusionSchedule::default();
        let target = Image::from_data(3, 2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let critic = Arc::new(PointMassCritic::new(target, s).unwrap());
        let server = CriticServer::spawn(TcpListener::bind("127.0.0.1:0").unwrap(), critic.clone()).unwrap();
        let remote = RemoteCritic::new(&RemoteConfig {
            address: server.addr().to_string(),
            timeout_ms: 5000,
            ..Default::default()
        })
        .unwrap();
        let noisy = Image::from_data(3, 2, 3, (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = [1.0];
        let cond = Conditioning {
            embedding: &w,
            weights: &w,
            prompts: &[],
            guidance_scale: 1.0,
            camera: None,
        };
        let t = 0.3137;
        let got = remote.denoise(&noisy, t, &cond).unwrap();
        let q = Image {
            data: quantize(&noisy.data).into_iter().map(f64::from).collect(),
            ..noisy.clone()
        };
        let want = critic.denoise(&q, (t as f32) as f64, &cond).unwrap();
        for (a, b) in got.data.iter().zip(&want.data) {
            assert_eq!(*a, (*b as f32) as f64);
        }
    }

    #[test]
    fn unreachable_server_is_retriable() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        let remote = RemoteCritic::new(&RemoteConfig {
            address: addr.to_string(),
            timeout_ms: 200,
            retries: 2,
            max_in_flight: 1,
        })
        .unwrap();
        let img = Image::new(1, 1, 3);
        let cond = Conditioning {
            embedding: &[],
            weights: &[],
            prompts: &[],
            guidance_scale: 1.0,
            camera: None,
        };
        let err = remote.denoise(&img, 0.5, &cond).unwrap_err();
        assert!(err.is_retriable(), "{err}");
        assert!(err.to_string().contains("3 attempts"));
    }
}
