//! Networked controller: a central node solves QPs on request and answers
//! with active sets packed as bit tuples; a local node rebuilds the laws
//! and closes the loop.
//!
//! Frames start with the magic `RMPC` and a version byte. Requests carry the
//! state as little-endian doubles and a strategy tag; responses carry a
//! little-endian `u16` count, `count` tuples of `ceil(q/8)` bytes and a
//! status byte. A `licq-fail` response is followed by the first input of the
//! solver's sequence (`m` doubles), which the local node applies for that
//! step.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;

use crate::linalg::Vector;
use crate::model::{BoxConstraints, MpcSpec, QpData};
use crate::qp::QpError;
use crate::simulator::{StepController, StepError};
use crate::strategies::{self, Controller, Plan, PlanStatus, StepOutcome, Strategy, StrategyOptions};

pub const MAGIC: [u8; 4] = *b"RMPC";
pub const VERSION: u8 = 1;
pub const DEFAULT_PORT: u16 = 4871;
const HEADER: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("active set index {index} out of range for q = {q}")]
    Validation { index: usize, q: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("central node reports an infeasible state")]
    Infeasible,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn protocol(msg: impl Into<String>) -> NetError {
    NetError::Protocol(msg.into())
}

/// Packs active sets as `q`-bit tuples, bit `i` (byte `i / 8`, bit `i % 8`)
/// set iff row `i` (zero based) is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveSetCodec {
    pub q: usize,
    pub bytes_per_set: usize,
}

impl ActiveSetCodec {
    pub fn new(q: usize) -> Self {
        Self { q, bytes_per_set: q.div_ceil(8) }
    }

    pub fn encode(&self, sets: &[Vec<usize>]) -> Result<Vec<u8>, NetError> {
        let mut out = vec![0u8; sets.len() * self.bytes_per_set];
        for (k, set) in sets.iter().enumerate() {
            let tuple = &mut out[k * self.bytes_per_set..(k + 1) * self.bytes_per_set];
            for &i in set {
                if i >= self.q {
                    return Err(NetError::Validation { index: i, q: self.q });
                }
                tuple[i / 8] |= 1 << (i % 8);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, bytes: &[u8], count: usize) -> Result<Vec<Vec<usize>>, NetError> {
        if bytes.len() != count * self.bytes_per_set {
            return Err(protocol(format!("payload of {} bytes for {count} sets of {} bytes", bytes.len(), self.bytes_per_set)));
        }
        let mut sets = Vec::with_capacity(count);
        for tuple in bytes.chunks(self.bytes_per_set.max(1)).take(count) {
            let mut set = Vec::new();
            for (b, &byte) in tuple.iter().enumerate() {
                for bit in 0..8 {
                    if byte & (1 << bit) != 0 {
                        let i = 8 * b + bit;
                        if i >= self.q {
                            return Err(protocol(format!("padding bit {i} set (q = {})", self.q)));
                        }
                        set.push(i);
                    }
                }
            }
            sets.push(set);
        }
        Ok(sets)
    }
}

pub fn encode_active_sets(sets: &[Vec<usize>], q: usize) -> Result<Vec<u8>, NetError> {
    ActiveSetCodec::new(q).encode(sets)
}

pub fn decode_active_sets(bytes: &[u8], q: usize, count: usize) -> Result<Vec<Vec<usize>>, NetError> {
    ActiveSetCodec::new(q).decode(bytes, count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub x: Vector,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    LicqFail = 1,
    Infeasible = 2,
}

impl Status {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Status::Ok),
            1 => Some(Status::LicqFail),
            2 => Some(Status::Infeasible),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub sets: Vec<Vec<usize>>,
    pub status: Status,
    /// Present exactly for `LicqFail`.
    pub fallback_u: Option<Vector>,
}

/// Frame sizes for one plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub q: usize,
}

impl Dims {
    pub fn of(qp: &QpData) -> Self {
        Self { n: qp.n, m: qp.m, q: qp.q() }
    }

    pub fn request_len(&self) -> usize {
        HEADER + 8 * self.n + 1
    }
}

fn header(out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
}

fn check_header(frame: &[u8]) -> Result<(), NetError> {
    if frame.len() < HEADER || frame[..4] != MAGIC {
        return Err(protocol("bad magic"));
    }
    if frame[4] != VERSION {
        return Err(protocol(format!("unsupported version {}", frame[4])));
    }
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, v: &Vector) {
    for &value in v.iter() {
        out.extend_from_slice(&value.to_le_bytes());
    }
}

fn get_f64s(bytes: &[u8], count: usize) -> Vector {
    Vector::from_fn(count, |i, _| {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[8 * i..8 * i + 8]);
        f64::from_le_bytes(b)
    })
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.x.len() + 1);
        header(&mut out);
        put_f64s(&mut out, &self.x);
        out.push(self.strategy.tag());
        out
    }

    pub fn decode(frame: &[u8], dims: Dims) -> Result<Self, NetError> {
        check_header(frame)?;
        if frame.len() != dims.request_len() {
            return Err(protocol(format!("request of {} bytes, expected {}", frame.len(), dims.request_len())));
        }
        let x = get_f64s(&frame[HEADER..], dims.n);
        let tag = frame[frame.len() - 1];
        let strategy = Strategy::from_tag(tag).ok_or_else(|| protocol(format!("unknown strategy tag {tag}")))?;
        Ok(Self { x, strategy })
    }
}

impl Response {
    pub fn encode(&self, codec: &ActiveSetCodec) -> Result<Vec<u8>, NetError> {
        let count = u16::try_from(self.sets.len()).map_err(|_| protocol("too many active sets"))?;
        let mut out = Vec::new();
        header(&mut out);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&codec.encode(&self.sets)?);
        out.push(self.status as u8);
        if let Some(u) = &self.fallback_u {
            put_f64s(&mut out, u);
        }
        Ok(out)
    }

    /// Reads one response frame from `r`.
    pub fn read_from(r: &mut impl Read, dims: Dims) -> Result<(Self, usize), NetError> {
        let codec = ActiveSetCodec::new(dims.q);
        let mut head = [0u8; HEADER + 2];
        r.read_exact(&mut head)?;
        check_header(&head)?;
        let count = u16::from_le_bytes([head[HEADER], head[HEADER + 1]]) as usize;
        let mut payload = vec![0u8; count * codec.bytes_per_set + 1];
        r.read_exact(&mut payload)?;
        let status_byte = payload.pop().expect("status byte");
        let status = Status::from_byte(status_byte).ok_or_else(|| protocol(format!("unknown status {status_byte}")))?;
        let sets = codec.decode(&payload, count)?;
        let mut total = head.len() + payload.len() + 1;
        let fallback_u = if status == Status::LicqFail {
            if count != 0 {
                return Err(protocol("licq-fail response with active sets"));
            }
            let mut raw = vec![0u8; 8 * dims.m];
            r.read_exact(&mut raw)?;
            total += raw.len();
            Some(get_f64s(&raw, dims.m))
        } else {
            None
        };
        Ok((Self { sets, status, fallback_u }, total))
    }

    pub fn decode(frame: &[u8], dims: Dims) -> Result<Self, NetError> {
        let mut cursor = io::Cursor::new(frame);
        let (resp, used) = Self::read_from(&mut cursor, dims)?;
        if used != frame.len() {
            return Err(protocol("trailing bytes after response"));
        }
        Ok(resp)
    }
}

/// Central node: solves QPs on demand.
#[derive(Debug, Clone)]
pub struct CentralNode {
    pub qp: Arc<QpData>,
    pub opts: StrategyOptions,
}

impl CentralNode {
    pub fn new(qp: Arc<QpData>, opts: StrategyOptions) -> Self {
        Self { qp, opts }
    }

    pub fn dims(&self) -> Dims {
        Dims::of(&self.qp)
    }

    pub fn respond(&self, req: &Request) -> Response {
        central_handle(&self.qp, &self.opts, req)
    }

    /// Decodes a request frame and encodes the response frame.
    pub fn handle_frame(&self, frame: &[u8]) -> Result<Vec<u8>, NetError> {
        let req = Request::decode(frame, self.dims())?;
        self.respond(&req).encode(&ActiveSetCodec::new(self.qp.q()))
    }

    /// Serves one connection until the peer closes it.
    pub fn serve_stream<S: Read + Write>(&self, stream: &mut S) -> Result<(), NetError> {
        let mut frame = vec![0u8; self.dims().request_len()];
        loop {
            match stream.read_exact(&mut frame) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
                Err(e) => return Err(e.into()),
            }
            let reply = self.handle_frame(&frame)?;
            stream.write_all(&reply)?;
            stream.flush()?;
        }
    }

    /// Accepts connections forever, one thread per local node.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let mut stream = stream?;
            stream.set_nodelay(true)?;
            let node = Arc::clone(&self);
            std::thread::spawn(move || {
                if let Err(e) = node.serve_stream(&mut stream) {
                    log::warn!("connection closed: {e}");
                }
            });
        }
        Ok(())
    }
}

pub fn central_handle(qp: &QpData, opts: &StrategyOptions, req: &Request) -> Response {
    match strategies::plan(qp, req.strategy, opts, &req.x) {
        Ok(Plan { status: PlanStatus::Ok, sets, .. }) => Response { sets, status: Status::Ok, fallback_u: None },
        Ok(Plan { status: PlanStatus::LicqFail { u }, .. }) => Response {
            sets: Vec::new(),
            status: Status::LicqFail,
            fallback_u: Some(u),
        },
        Err(QpError::Infeasible) | Err(_) => Response {
            sets: Vec::new(),
            status: Status::Infeasible,
            fallback_u: None,
        },
    }
}

/// Ordered reliable byte channel to a central node.
pub trait Link {
    /// Sends a request frame and returns the decoded response with the
    /// number of response bytes received.
    fn exchange(&mut self, request: &[u8], dims: Dims) -> Result<(Response, usize), NetError>;
}

/// Calls the central node directly.
#[derive(Debug, Clone)]
pub struct InProcessLink {
    pub central: CentralNode,
}

impl Link for InProcessLink {
    fn exchange(&mut self, request: &[u8], dims: Dims) -> Result<(Response, usize), NetError> {
        let reply = self.central.handle_frame(request)?;
        let len = reply.len();
        Ok((Response::decode(&reply, dims)?, len))
    }
}

pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }
}

impl Link for TcpLink {
    fn exchange(&mut self, request: &[u8], dims: Dims) -> Result<(Response, usize), NetError> {
        self.stream.write_all(request)?;
        self.stream.flush()?;
        Response::read_from(&mut self.stream, dims)
    }
}

/// Uniform quantizer over a box, as an ADC/DAC of `bits` resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    lo: Vector,
    hi: Vector,
    levels: f64,
}

impl Quantizer {
    pub fn new(lo: Vector, hi: Vector, bits: u32) -> Self {
        Self { lo, hi, levels: (2f64.powi(bits as i32) - 1.0).max(1.0) }
    }

    pub fn step(&self) -> Vector {
        (&self.hi - &self.lo) / self.levels
    }

    pub fn apply(&self, v: &Vector) -> Vector {
        Vector::from_fn(v.len(), |i, _| {
            let span = self.hi[i] - self.lo[i];
            if span <= 0.0 {
                return self.lo[i];
            }
            let level = ((v[i] - self.lo[i]) / span * self.levels).round().clamp(0.0, self.levels);
            self.lo[i] + level / self.levels * span
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub requests: usize,
    /// Active-set tuple bytes received.
    pub payload_bytes: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

/// Local node: evaluates cached laws and asks the central node when none
/// applies.
pub struct LocalNode<L: Link> {
    pub qp: Arc<QpData>,
    pub controller: Controller,
    pub link: L,
    pub stats: LinkStats,
    measure: Option<Quantizer>,
    actuate: Option<Quantizer>,
}

impl<L: Link> LocalNode<L> {
    pub fn new(spec: &MpcSpec, qp: Arc<QpData>, strategy: Strategy, opts: StrategyOptions, link: L) -> Self {
        Self {
            controller: Controller::new(spec, strategy, opts),
            qp,
            link,
            stats: LinkStats::default(),
            measure: None,
            actuate: None,
        }
    }

    /// Quantizes measured states and applied inputs over the constraint box.
    pub fn with_quantization(mut self, bx: &BoxConstraints, bits: u32) -> Self {
        self.measure = Some(Quantizer::new(bx.x_lo.clone(), bx.x_hi.clone(), bits));
        self.actuate = Some(Quantizer::new(bx.u_lo.clone(), bx.u_hi.clone(), bits));
        self
    }

    pub fn local_step(&mut self, x: &Vector) -> Result<StepOutcome, NetError> {
        let xm = match &self.measure {
            Some(qz) => qz.apply(x),
            None => x.clone(),
        };
        let mut out = match self.controller.try_reuse(&self.qp, &xm) {
            Some(out) => out,
            None => {
                let dims = Dims::of(&self.qp);
                let frame = Request { x: xm.clone(), strategy: self.controller.strategy }.encode();
                let (resp, received) = self.link.exchange(&frame, dims)?;
                self.stats.requests += 1;
                self.stats.bytes_up += frame.len();
                self.stats.bytes_down += received;
                self.stats.payload_bytes += resp.sets.len() * ActiveSetCodec::new(dims.q).bytes_per_set;
                let status = match resp.status {
                    Status::Ok => PlanStatus::Ok,
                    Status::LicqFail => PlanStatus::LicqFail {
                        u: resp.fallback_u.ok_or_else(|| protocol("licq-fail without input"))?,
                    },
                    Status::Infeasible => return Err(NetError::Infeasible),
                };
                if status == PlanStatus::Ok && resp.sets.is_empty() {
                    return Err(protocol("ok response without active sets"));
                }
                let plan = Plan { status, sets: resp.sets, laws: Vec::new() };
                self.controller.install(&self.qp, &xm, plan)
            }
        };
        if let Some(qz) = &self.actuate {
            out.u = qz.apply(&out.u);
        }
        Ok(out)
    }
}

impl<L: Link> StepController for LocalNode<L> {
    fn control(&mut self, x: &Vector) -> Result<StepOutcome, StepError> {
        Ok(self.local_step(x)?)
    }
}
