//! Framing, codecs, and the connections that carry a delegation session.
//!
//! Every message travels as one frame: a fixed 29-byte header (magic, kind,
//! session id, body length) followed by the body. Matrices go dense and
//! row-major as little-endian words; lists carry a count prefix. The same
//! bytes flow over the in-process loopback and over TCP, so byte and round
//! accounting measured on the loopback is exactly what a socket would see.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use crate::error::Error;
use crate::lpn::{LpnSchedule, NoiseRate, SeededRng};
use crate::protocol::{
    client_init_phase1, server_handle, simple_init, simple_mul, Body, ClientState, Deviation,
    Message, ServerSession, SessionId, SimpleClientState, SESSION_ID_LEN,
};
use crate::ring_matrix::DenseMatrix;
use crate::trapdoor::TargetedGenerator;

pub const FRAME_MAGIC: [u8; 4] = *b"TMX1";
pub const FRAME_HEADER_LEN: usize = 29;
/// Upper bound on a frame body; anything larger is rejected unread.
pub const MAX_BODY_LEN: u64 = 1 << 40;

const KIND_CHAIN_UPLOAD: u8 = 1;
const KIND_CHAIN_PRODUCTS_REPLY: u8 = 2;
const KIND_A_ENC_UPLOAD: u8 = 3;
const KIND_A_ENC_PARTIALS_REPLY: u8 = 4;
const KIND_ONLINE_REQUEST: u8 = 5;
const KIND_ONLINE_REPLY: u8 = 6;
const KIND_ABORT: u8 = 7;

fn kind_code(body: &Body) -> u8 {
    match body {
        Body::ChainUpload { .. } => KIND_CHAIN_UPLOAD,
        Body::ChainProductsReply { .. } => KIND_CHAIN_PRODUCTS_REPLY,
        Body::AEncUpload { .. } => KIND_A_ENC_UPLOAD,
        Body::AEncPartialsReply { .. } => KIND_A_ENC_PARTIALS_REPLY,
        Body::OnlineRequest { .. } => KIND_ONLINE_REQUEST,
        Body::OnlineReply { .. } => KIND_ONLINE_REPLY,
        Body::Abort { .. } => KIND_ABORT,
    }
}

/// Cursor over a received body; every failure records how far in it was.
struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    /// Offset of this body inside the whole frame, for error reporting.
    base: u64,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: u64) -> Self {
        Reader { buf, at: 0, base }
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.base + self.at as u64,
            detail: detail.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.remaining() < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, have {}",
                self.remaining()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, Error> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<(), Error> {
        if self.remaining() != 0 {
            return Err(self.fail(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Serialized size of one dense matrix.
pub fn dense_wire_len(rows: usize, cols: usize) -> u64 {
    8 + 4 * rows as u64 * cols as u64
}

pub fn encode_dense(m: &DenseMatrix, out: &mut Vec<u8>) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.reserve(m.data().len() * 4);
    for &w in m.data() {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

fn decode_dense(r: &mut Reader) -> Result<DenseMatrix, Error> {
    let rows = r.u32("matrix rows")? as usize;
    let cols = r.u32("matrix cols")? as usize;
    let words = rows as u64 * cols as u64;
    if words > r.remaining() as u64 / 4 {
        return Err(r.fail(format!(
            "matrix {rows}x{cols} needs {words} words, have {} bytes",
            r.remaining()
        )));
    }
    let raw = r.take(words as usize * 4, "matrix words")?;
    let data: Vec<u32> = raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    DenseMatrix::from_vec(rows, cols, data)
        .map_err(|e| r.fail(format!("bad matrix: {e}")))
}

fn encode_list(ms: &[DenseMatrix], out: &mut Vec<u8>) {
    out.extend_from_slice(&(ms.len() as u32).to_le_bytes());
    for m in ms {
        encode_dense(m, out);
    }
}

fn decode_list(r: &mut Reader) -> Result<Vec<DenseMatrix>, Error> {
    let count = r.u32("matrix count")? as usize;
    // each matrix costs at least its 8-byte shape header
    if count as u64 * 8 > r.remaining() as u64 {
        return Err(r.fail(format!("matrix count {count} exceeds the body")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(decode_dense(r)?);
    }
    Ok(out)
}

fn encode_body(body: &Body, out: &mut Vec<u8>) {
    match body {
        Body::ChainUpload { levels } => encode_list(levels, out),
        Body::ChainProductsReply { fwd, upper } => {
            encode_list(fwd, out);
            encode_list(upper, out);
        }
        Body::AEncUpload { a_enc } => encode_dense(a_enc, out),
        Body::AEncPartialsReply { partials } => encode_list(partials, out),
        Body::OnlineRequest { b_enc } => encode_dense(b_enc, out),
        Body::OnlineReply { y0, probes } => {
            encode_dense(y0, out);
            encode_list(probes, out);
        }
        Body::Abort { reason } => {
            out.extend_from_slice(&(reason.len() as u32).to_le_bytes());
            out.extend_from_slice(reason.as_bytes());
        }
    }
}

fn decode_body(kind: u8, r: &mut Reader) -> Result<Body, Error> {
    let body = match kind {
        KIND_CHAIN_UPLOAD => Body::ChainUpload {
            levels: decode_list(r)?,
        },
        KIND_CHAIN_PRODUCTS_REPLY => Body::ChainProductsReply {
            fwd: decode_list(r)?,
            upper: decode_list(r)?,
        },
        KIND_A_ENC_UPLOAD => Body::AEncUpload {
            a_enc: decode_dense(r)?,
        },
        KIND_A_ENC_PARTIALS_REPLY => Body::AEncPartialsReply {
            partials: decode_list(r)?,
        },
        KIND_ONLINE_REQUEST => Body::OnlineRequest {
            b_enc: decode_dense(r)?,
        },
        KIND_ONLINE_REPLY => Body::OnlineReply {
            y0: decode_dense(r)?,
            probes: decode_list(r)?,
        },
        KIND_ABORT => {
            let len = r.u32("abort reason length")? as usize;
            let raw = r.take(len, "abort reason")?;
            let reason = std::str::from_utf8(raw)
                .map_err(|_| r.fail("abort reason is not utf-8"))?
                .to_string();
            Body::Abort { reason }
        }
        other => return Err(r.fail(format!("unknown message kind {other}"))),
    };
    r.finish()?;
    Ok(body)
}

/// Serializes a message into one complete frame.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    encode_body(&msg.body, &mut body);
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    frame.extend_from_slice(&FRAME_MAGIC);
    frame.push(kind_code(&msg.body));
    frame.extend_from_slice(&msg.session);
    frame.extend_from_slice(&(body.len() as u64).to_le_bytes());
    frame.extend_from_slice(&body);
    frame
}

/// Parses one complete frame. Malformed input of any shape comes back as a
/// [`Error::Decode`] with the offending byte offset; nothing panics.
pub fn decode_message(frame: &[u8]) -> Result<Message, Error> {
    if frame.len() < FRAME_HEADER_LEN {
        return Err(Error::Decode {
            offset: frame.len() as u64,
            detail: format!("frame shorter than the {FRAME_HEADER_LEN}-byte header"),
        });
    }
    if frame[..4] != FRAME_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let kind = frame[4];
    let mut session = [0u8; SESSION_ID_LEN];
    session.copy_from_slice(&frame[5..5 + SESSION_ID_LEN]);
    let body_len = u64::from_le_bytes(frame[21..29].try_into().expect("8 bytes"));
    if body_len > MAX_BODY_LEN {
        return Err(Error::Decode {
            offset: 21,
            detail: format!("body length {body_len} exceeds the {MAX_BODY_LEN} cap"),
        });
    }
    if body_len != (frame.len() - FRAME_HEADER_LEN) as u64 {
        return Err(Error::Decode {
            offset: 21,
            detail: format!(
                "header claims {body_len} body bytes, frame has {}",
                frame.len() - FRAME_HEADER_LEN
            ),
        });
    }
    let mut r = Reader::new(&frame[FRAME_HEADER_LEN..], FRAME_HEADER_LEN as u64);
    let body = decode_body(kind, &mut r)?;
    Ok(Message { session, body })
}

/// Writes one frame; returns the bytes put on the wire.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<u64, Error> {
    let frame = encode_message(msg);
    if (frame.len() - FRAME_HEADER_LEN) as u64 > MAX_BODY_LEN {
        return Err(Error::Transport(format!(
            "refusing to send a {} byte body",
            frame.len() - FRAME_HEADER_LEN
        )));
    }
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len() as u64)
}

/// Reads one frame. `Ok(None)` is a clean end of stream (the peer closed
/// between messages); anything else that cuts off mid-frame is an error.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<(Message, u64)>, Error> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < FRAME_HEADER_LEN {
        let k = r.read(&mut header[got..])?;
        if k == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Transport(format!(
                "connection closed {got} bytes into a frame header"
            )));
        }
        got += k;
    }
    let body_len = u64::from_le_bytes(header[21..29].try_into().expect("8 bytes"));
    if body_len > MAX_BODY_LEN {
        return Err(Error::Decode {
            offset: 21,
            detail: format!("body length {body_len} exceeds the {MAX_BODY_LEN} cap"),
        });
    }
    // grows with actual arrivals, so a lying length cannot force a huge
    // allocation up front
    let mut body = Vec::new();
    r.take(body_len).read_to_end(&mut body)?;
    if body.len() as u64 != body_len {
        return Err(Error::Transport(format!(
            "connection closed {} bytes into a {body_len} byte body",
            body.len()
        )));
    }
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    frame.extend_from_slice(&header);
    frame.extend_from_slice(&body);
    let msg = decode_message(&frame)?;
    Ok(Some((msg, frame.len() as u64)))
}

/// Traffic accounting from the client's point of view. A round is a
/// direction flip: some number of sends followed by a receive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub bytes_out: u64,
    pub bytes_in: u64,
    pub msgs_out: u64,
    pub msgs_in: u64,
    pub rounds: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Idle,
    Out,
    In,
}

enum Inner {
    Loopback {
        sess: Box<ServerSession>,
        queue: VecDeque<Vec<u8>>,
    },
    Tcp(TcpStream),
}

/// The client end of a connection: either an in-process server or a TCP
/// peer, behind the same send/recv/stats surface.
pub struct Connection {
    inner: Inner,
    stats: TransportStats,
    dir: Direction,
}

/// Builds both ends of an in-process connection and returns the client end;
/// the server end is `sess`, driven synchronously by every send. Messages
/// still round-trip through the full codec, so the byte accounting matches
/// a real socket exactly.
pub fn loopback_pair(sess: ServerSession) -> Connection {
    Connection {
        inner: Inner::Loopback {
            sess: Box::new(sess),
            queue: VecDeque::new(),
        },
        stats: TransportStats::default(),
        dir: Direction::Idle,
    }
}

/// Connects to a serving peer.
pub fn tcp_connect<A: ToSocketAddrs>(addr: A) -> Result<Connection, Error> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true).ok();
    Ok(Connection {
        inner: Inner::Tcp(stream),
        stats: TransportStats::default(),
        dir: Direction::Idle,
    })
}

impl Connection {
    pub fn send(&mut self, msg: &Message) -> Result<(), Error> {
        let n = match &mut self.inner {
            Inner::Loopback { sess, queue } => {
                let frame = encode_message(msg);
                let decoded = decode_message(&frame)?;
                let reply = match server_handle(sess, decoded) {
                    Ok(r) => r,
                    Err(e) => Message {
                        session: msg.session,
                        body: Body::Abort {
                            reason: e.to_string(),
                        },
                    },
                };
                queue.push_back(encode_message(&reply));
                frame.len() as u64
            }
            Inner::Tcp(stream) => write_message(stream, msg)?,
        };
        self.stats.bytes_out += n;
        self.stats.msgs_out += 1;
        self.dir = Direction::Out;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message, Error> {
        let (msg, n) = match &mut self.inner {
            Inner::Loopback { queue, .. } => {
                let frame = queue.pop_front().ok_or_else(|| {
                    Error::Transport("nothing queued on the loopback".into())
                })?;
                (decode_message(&frame)?, frame.len() as u64)
            }
            Inner::Tcp(stream) => read_message(stream)?.ok_or_else(|| {
                Error::Transport("connection closed while waiting for a reply".into())
            })?,
        };
        self.stats.bytes_in += n;
        self.stats.msgs_in += 1;
        if self.dir == Direction::Out {
            self.stats.rounds += 1;
        }
        self.dir = Direction::In;
        Ok(msg)
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    /// The in-process server, when this is a loopback.
    pub fn server_mut(&mut self) -> Option<&mut ServerSession> {
        match &mut self.inner {
            Inner::Loopback { sess, .. } => Some(sess),
            Inner::Tcp(_) => None,
        }
    }
}

fn expect_reply(conn: &mut Connection) -> Result<Message, Error> {
    let msg = conn.recv()?;
    if let Body::Abort { reason } = &msg.body {
        return Err(Error::Transport(format!("server aborted: {reason}")));
    }
    Ok(msg)
}

/// How a listening server behaves.
#[derive(Clone, Copy, Default)]
pub struct ServeOptions {
    /// Lie in the configured way; testing only.
    pub deviation: Option<(Deviation, u64)>,
    /// Log one line per handled message to stderr.
    pub log: bool,
}

fn serve_conn(mut stream: TcpStream, opts: ServeOptions) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "?".into());
    let mut sessions: HashMap<SessionId, ServerSession> = HashMap::new();
    loop {
        let (msg, n_in) = match read_message(&mut stream) {
            Ok(Some(v)) => v,
            Ok(None) => return,
            Err(e) => {
                if opts.log {
                    eprintln!("[serve] {peer}: read failed: {e}");
                }
                return;
            }
        };
        let session = msg.session;
        let sess = sessions.entry(session).or_insert_with(|| match opts.deviation {
            Some((dv, seed)) => ServerSession::with_deviation(session, dv, seed),
            None => ServerSession::new(session),
        });
        let kind = msg.body.kind_name();
        let reply = match server_handle(sess, msg) {
            Ok(r) => r,
            Err(e) => Message {
                session,
                body: Body::Abort {
                    reason: e.to_string(),
                },
            },
        };
        let n_out = match write_message(&mut stream, &reply) {
            Ok(n) => n,
            Err(e) => {
                if opts.log {
                    eprintln!("[serve] {peer}: write failed: {e}");
                }
                return;
            }
        };
        if opts.log {
            let id = u32::from_le_bytes(session[..4].try_into().expect("4 bytes"));
            eprintln!(
                "[serve] {peer} session={id:08x} {kind} -> {} ({n_in} bytes in, {n_out} out)",
                reply.body.kind_name()
            );
        }
    }
}

/// Accepts connections forever, one thread each. Sessions live per
/// connection; a connection may interleave any number of them.
pub fn tcp_serve(listener: TcpListener, opts: ServeOptions) -> Result<(), Error> {
    for stream in listener.incoming() {
        let stream = stream?;
        std::thread::spawn(move || serve_conn(stream, opts));
    }
    Ok(())
}

/// Wire bytes for a full init, (client to server, server to client).
pub fn init_wire_bytes(m: usize, dims: &[usize]) -> (u64, u64) {
    let d = dims.len() - 1;
    let header = FRAME_HEADER_LEN as u64;
    let mut chain_upload = 4u64;
    for i in 1..=d {
        chain_upload += dense_wire_len(dims[i - 1], dims[i]);
    }
    let a_enc_upload = dense_wire_len(m, dims[0]);
    let out = 2 * header + chain_upload + a_enc_upload;

    let mut products_reply = 8u64; // two list counts
    for i in 1..=d {
        products_reply += dense_wire_len(dims[0], dims[i]);
    }
    for j in 1..=d {
        for i in j..=d {
            products_reply += dense_wire_len(dims[j], dims[i]);
        }
    }
    let mut partials_reply = 4u64;
    for i in 1..=d {
        partials_reply += dense_wire_len(m, dims[i]);
    }
    let inn = 2 * header + products_reply + partials_reply;
    (out, inn)
}

/// Wire bytes for one online step of width `l`, (client to server, server
/// to client).
pub fn online_wire_bytes(m: usize, dims: &[usize], l: usize) -> (u64, u64) {
    let d = dims.len() - 1;
    let header = FRAME_HEADER_LEN as u64;
    let out = header + dense_wire_len(dims[0], l);
    let mut inn = header + dense_wire_len(m, l) + 4;
    for i in 1..=d {
        inn += dense_wire_len(dims[i], l);
    }
    (out, inn)
}

/// Runs the two-round init over a connection and returns a ready client.
pub fn run_init(
    a: DenseMatrix,
    schedule: &LpnSchedule,
    rng: SeededRng,
    conn: &mut Connection,
) -> Result<ClientState, Error> {
    let (mut client, m1) = client_init_phase1(a, schedule, rng)?;
    conn.send(&m1)?;
    let r1 = expect_reply(conn)?;
    let m2 = client.client_init_phase2(&r1)?;
    conn.send(&m2)?;
    let r2 = expect_reply(conn)?;
    client.client_init_phase3(&r2)?;
    Ok(client)
}

/// One delegated product on a ready client: one round trip.
pub fn run_online(
    client: &mut ClientState,
    b: &DenseMatrix,
    conn: &mut Connection,
) -> Result<DenseMatrix, Error> {
    let req = client.client_online(b)?;
    conn.send(&req)?;
    let rep = expect_reply(conn)?;
    client.client_online_finish(&rep)
}

/// A once-off product, pipelined: the online request rides in the same
/// round as the masked upload, so init plus the product costs two round
/// trips total.
pub fn run_matmul_once(
    a: DenseMatrix,
    b: &DenseMatrix,
    schedule: &LpnSchedule,
    rng: SeededRng,
    conn: &mut Connection,
) -> Result<(DenseMatrix, ClientState), Error> {
    let (mut client, m1) = client_init_phase1(a, schedule, rng)?;
    conn.send(&m1)?;
    let r1 = expect_reply(conn)?;
    let m2 = client.client_init_phase2(&r1)?;
    let req = client.client_online(b)?;
    conn.send(&m2)?;
    conn.send(&req)?;
    let r2 = expect_reply(conn)?;
    let rep = expect_reply(conn)?;
    client.client_init_phase3(&r2)?;
    let ab = client.client_online_finish(&rep)?;
    Ok((ab, client))
}

/// Builds a targeted generator over the wire: one delegated zero product.
pub fn run_generator(
    client: &mut ClientState,
    t: usize,
    l: usize,
    conn: &mut Connection,
) -> Result<TargetedGenerator, Error> {
    let req = client.generator_start(t, l)?;
    conn.send(&req)?;
    let rep = expect_reply(conn)?;
    client.generator_finish(&rep)
}

/// Single-level init over a connection: ships the masked operand under a
/// fresh session and waits for the (empty) ack.
pub fn run_simple_init(
    a: DenseMatrix,
    n1: usize,
    mu: NoiseRate,
    mut rng: SeededRng,
    conn: &mut Connection,
) -> Result<(SimpleClientState, SessionId), Error> {
    let mut session = [0u8; SESSION_ID_LEN];
    for chunk in session.chunks_mut(8) {
        let x = rng.next_u64().to_le_bytes();
        chunk.copy_from_slice(&x[..chunk.len()]);
    }
    let (state, a_enc) = simple_init(a, n1, mu, rng)?;
    conn.send(&Message {
        session,
        body: Body::AEncUpload { a_enc },
    })?;
    let ack = expect_reply(conn)?;
    match &ack.body {
        Body::AEncPartialsReply { partials } if partials.is_empty() => Ok((state, session)),
        other => Err(Error::MalformedMessage(format!(
            "expected an empty partials ack, got {}",
            other.kind_name()
        ))),
    }
}

/// One single-level product over a connection.
pub fn run_simple_mul(
    state: &mut SimpleClientState,
    session: SessionId,
    b: &DenseMatrix,
    conn: &mut Connection,
) -> Result<DenseMatrix, Error> {
    simple_mul(state, b, |b_enc| {
        conn.send(&Message {
            session,
            body: Body::OnlineRequest {
                b_enc: b_enc.clone(),
            },
        })?;
        let rep = expect_reply(conn)?;
        match rep.body {
            Body::OnlineReply { y0, .. } => Ok(y0),
            other => Err(Error::MalformedMessage(format!(
                "expected online-reply, got {}",
                other.kind_name()
            ))),
        }
    })
}
