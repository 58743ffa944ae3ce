//! The delegation protocol.
//!
//! A client holding a private `m x n` matrix `A` enlists an untrusted
//! server for products `A B`. Initialization uploads a public chain and the
//! masked matrix `A_enc = A + A'`; each online step uploads a masked right
//! operand `B_enc = B + B'` and unmasks the server's product using the
//! trapdoors and the retained per-level products:
//!
//! `A B = A_enc B_enc - A B' - A' B_enc`
//!
//! where the two correction terms cost the client only mask-expansion
//! arithmetic, never a full `m n l` product.
//!
//! Every init reply is verified by probing before anything derived from it
//! is used, and a failed check aborts the session and scrubs the secrets.
//! Online replies are deliberately left unchecked on the fast path; see
//! [`crate::verify::zero_query_auditor`] for the cheap audit that bounds
//! undetected deviation, or enable [`ClientState::set_output_check`] to
//! probe every unmasked product.

use crate::error::Error;
use crate::lpn::{sample_noise, sample_uniform, LpnSchedule, NoiseRate, Ratio, SeededRng};
use crate::ring_matrix::{
    add_sparse_into, dense_sparse_mul, mat_add, mat_mul, mat_sub, sparse_dense_mul, transpose,
    DenseMatrix, OpCounter, SparseMatrix,
};
use crate::trapdoor::{
    fast_ab_prime, fast_aprime_benc, gen_chain, left_partials_from_secret, targeted_generator,
    ChainProducts, LeftMaskSecret, PrecomputedLeft, RightMaskSecret, TargetedGenerator,
};
use crate::verify::{check_partial_products, freivalds_check, joint_probe_width, CheckConfig};

pub const SESSION_ID_LEN: usize = 16;
pub type SessionId = [u8; SESSION_ID_LEN];

/// Protocol messages. The payload carries whole matrices; serialization
/// lives in [`crate::transport`].
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub session: SessionId,
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    /// Client uploads the public chain.
    ChainUpload { levels: Vec<DenseMatrix> },
    /// Server returns every forward product and the upper gram triangle.
    ChainProductsReply {
        fwd: Vec<DenseMatrix>,
        upper: Vec<DenseMatrix>,
    },
    /// Client uploads the masked left operand.
    AEncUpload { a_enc: DenseMatrix },
    /// Server returns `A_enc fwd(i)` for every level.
    AEncPartialsReply { partials: Vec<DenseMatrix> },
    /// Client uploads a masked right operand.
    OnlineRequest { b_enc: DenseMatrix },
    /// Server returns the heavy product and the probe ladder
    /// `probes[i-1] = fwd(i)^T B_enc`.
    OnlineReply {
        y0: DenseMatrix,
        probes: Vec<DenseMatrix>,
    },
    /// Either side gives up; the session is dead afterwards.
    Abort { reason: String },
}

impl Body {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Body::ChainUpload { .. } => "chain-upload",
            Body::ChainProductsReply { .. } => "chain-products-reply",
            Body::AEncUpload { .. } => "a-enc-upload",
            Body::AEncPartialsReply { .. } => "a-enc-partials-reply",
            Body::OnlineRequest { .. } => "online-request",
            Body::OnlineReply { .. } => "online-reply",
            Body::Abort { .. } => "abort",
        }
    }
}

fn fresh_session(rng: &mut SeededRng) -> SessionId {
    let mut id = [0u8; SESSION_ID_LEN];
    for chunk in id.chunks_mut(8) {
        let x = rng.next_u64().to_le_bytes();
        chunk.copy_from_slice(&x[..chunk.len()]);
    }
    id
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    SentChain,
    SentAEnc,
    Ready,
    Aborted,
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::SentChain => "sent-chain",
        Phase::SentAEnc => "sent-a-enc",
        Phase::Ready => "ready",
        Phase::Aborted => "aborted",
    }
}

/// Where the mask for an in-flight online step came from.
enum MaskSource {
    /// Freshly sampled trapdoor; the correction product is computed at
    /// unmask time.
    Secret(RightMaskSecret),
    /// A precomputed pair from a generator; the correction product is
    /// already known.
    Pair { ab_prime: DenseMatrix },
}

enum PendingKind {
    Standard,
    Generator { t: usize, l: usize },
}

struct PendingOnline {
    source: MaskSource,
    b_enc: DenseMatrix,
    /// Retained only when the output check is on.
    b: Option<DenseMatrix>,
    kind: PendingKind,
}

/// Client half of a delegation session.
pub struct ClientState {
    session: SessionId,
    schedule: LpnSchedule,
    phase: Phase,
    rng: SeededRng,
    counter: OpCounter,
    a: DenseMatrix,
    /// Chain factors; needed for the init checks, dropped once both init
    /// replies have been verified.
    levels: Vec<DenseMatrix>,
    a_enc: Option<DenseMatrix>,
    products: Option<ChainProducts>,
    fwd: Vec<DenseMatrix>,
    left: Option<LeftMaskSecret>,
    al: Option<PrecomputedLeft>,
    pending: Option<PendingOnline>,
    check_output: bool,
}

impl std::fmt::Debug for ClientState {
    // deliberately shallow: the state holds trapdoors that must never land
    // in logs
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientState")
            .field("session", &self.session)
            .field("phase", &self.phase)
            .field("rows", &self.a.rows())
            .field("dims", &self.schedule.dims())
            .finish_non_exhaustive()
    }
}

/// Starts a session: samples the session id and the public chain, returns
/// the chain upload. `a` is the private left operand, `n x` anything wide.
pub fn client_init_phase1(
    a: DenseMatrix,
    schedule: &LpnSchedule,
    mut rng: SeededRng,
) -> Result<(ClientState, Message), Error> {
    if a.cols() != schedule.dim(0) {
        return Err(Error::Parameter(format!(
            "left operand has {} columns but the schedule starts at {}",
            a.cols(),
            schedule.dim(0)
        )));
    }
    let session = fresh_session(&mut rng);
    let chain = gen_chain(schedule, &mut rng);
    let levels = chain.levels().to_vec();
    let state = ClientState {
        session,
        schedule: schedule.clone(),
        phase: Phase::SentChain,
        rng,
        counter: OpCounter::new(),
        a,
        levels: levels.clone(),
        a_enc: None,
        products: None,
        fwd: Vec::new(),
        left: None,
        al: None,
        pending: None,
        check_output: false,
    };
    let msg = Message {
        session,
        body: Body::ChainUpload { levels },
    };
    Ok((state, msg))
}

impl ClientState {
    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn schedule(&self) -> &LpnSchedule {
        &self.schedule
    }

    pub fn ops(&self) -> OpCounter {
        self.counter
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    /// When on, every unmasked online result is probed against the honest
    /// product before being returned. Costs an extra `(mn + nl + ml)
    /// lambda_prime` multiplications per step.
    pub fn set_output_check(&mut self, on: bool) {
        self.check_output = on;
    }

    fn expect_phase(&self, want: Phase, expected: &'static str) -> Result<(), Error> {
        if self.phase != want {
            return Err(Error::Phase {
                expected,
                got: phase_name(self.phase),
            });
        }
        Ok(())
    }

    fn take_reply(&self, msg: &Message) -> Result<(), Error> {
        if msg.session != self.session {
            return Err(Error::SessionMismatch);
        }
        Ok(())
    }

    /// Kills the session and scrubs everything secret.
    fn abort(&mut self) {
        self.phase = Phase::Aborted;
        self.left = None; // trapdoor scrub runs in its Drop
        self.al = None;
        self.pending = None;
        self.products = None;
        self.fwd = Vec::new();
        self.levels = Vec::new();
        self.a_enc = None;
    }

    /// Handles the chain-products reply: verifies the whole table by
    /// probing, then samples the left trapdoor and returns the masked
    /// upload. Verification failure aborts the session.
    pub fn client_init_phase2(&mut self, reply: &Message) -> Result<Message, Error> {
        self.expect_phase(Phase::SentChain, "sent-chain")?;
        self.take_reply(reply)?;
        let (fwd, upper) = match &reply.body {
            Body::ChainProductsReply { fwd, upper } => (fwd, upper),
            other => {
                return Err(Error::MalformedMessage(format!(
                    "expected chain-products-reply, got {}",
                    other.kind_name()
                )))
            }
        };
        let products =
            match ChainProducts::from_parts(self.schedule.dims(), fwd.clone(), upper.clone()) {
                Ok(p) => p,
                Err(e) => {
                    self.abort();
                    return Err(e);
                }
            };
        if !self.verify_chain_products(&products)? {
            self.abort();
            return Err(Error::DishonestServer {
                stage: "chain products",
            });
        }

        let m = self.a.rows();
        let left = LeftMaskSecret::sample(m, &self.schedule, &mut self.rng);
        let a_prime =
            crate::trapdoor::expand_left_mask_from_table(products.fwd_all(), &left, &mut self.counter)?;
        let a_enc = mat_add(&self.a, &a_prime)?;
        self.left = Some(left);
        self.products = Some(products);
        self.a_enc = Some(a_enc.clone());
        self.phase = Phase::SentAEnc;
        Ok(Message {
            session: self.session,
            body: Body::AEncUpload { a_enc },
        })
    }

    /// Probes the received product table: the forward ladder against the
    /// chain, then every gram row against its forward product. One joint
    /// probe width covers the whole batch, sized so the union of all init
    /// checks keeps lambda-bit soundness.
    fn verify_chain_products(&mut self, products: &ChainProducts) -> Result<bool, Error> {
        let d = self.schedule.depth();
        // fwd(1) is L_1 itself: an exact comparison, no probe spent
        if products.fwd(1) != &self.levels[0] {
            return Ok(false);
        }
        let checks = (d - 1) + d * d + d;
        let width = joint_probe_width(self.schedule.lambda(), checks);
        let mut cfg = CheckConfig::new(width, self.rng.fork());

        let ok = check_partial_products(
            &self.levels,
            &products.fwd_all()[1..],
            &mut cfg,
            &mut self.counter,
        )?;
        if !ok {
            return Ok(false);
        }
        for j in 1..=d {
            let mut factors = Vec::with_capacity(d + 1);
            factors.push(products.gram(j, 0));
            factors.extend(self.levels.iter().cloned());
            let partials: Vec<DenseMatrix> = (1..=d).map(|i| products.gram(j, i)).collect();
            let ok = check_partial_products(&factors, &partials, &mut cfg, &mut self.counter)?;
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Handles the masked-upload reply: verifies the per-level products of
    /// `A_enc`, strips the mask contribution off each, and becomes ready
    /// for online steps. Verification failure aborts the session.
    pub fn client_init_phase3(&mut self, reply: &Message) -> Result<(), Error> {
        self.expect_phase(Phase::SentAEnc, "sent-a-enc")?;
        self.take_reply(reply)?;
        let partials = match &reply.body {
            Body::AEncPartialsReply { partials } => partials,
            other => {
                return Err(Error::MalformedMessage(format!(
                    "expected a-enc-partials-reply, got {}",
                    other.kind_name()
                )))
            }
        };
        let d = self.schedule.depth();
        let m = self.a.rows();
        if partials.len() != d {
            self.abort();
            return Err(Error::MalformedMessage(format!(
                "expected {d} masked partials, got {}",
                partials.len()
            )));
        }
        for (i, p) in partials.iter().enumerate() {
            let want = (m, self.schedule.dim(i + 1));
            if p.shape() != want {
                self.abort();
                return Err(Error::MalformedMessage(format!(
                    "masked partial {} has shape {:?}, expected {want:?}",
                    i + 1,
                    p.shape()
                )));
            }
        }

        let a_enc = self.a_enc.take().expect("set in phase 2");
        let checks = d; // joint width is per batch; this batch has d rungs
        let width = joint_probe_width(self.schedule.lambda(), checks);
        let mut cfg = CheckConfig::new(width, self.rng.fork());
        let mut factors = Vec::with_capacity(d + 1);
        factors.push(a_enc);
        factors.extend(self.levels.iter().cloned());
        let ok = check_partial_products(&factors, partials, &mut cfg, &mut self.counter)?;
        if !ok {
            self.abort();
            return Err(Error::DishonestServer {
                stage: "masked partial products",
            });
        }

        let products = self.products.take().expect("set in phase 2");
        let left = self.left.as_ref().expect("set in phase 2");
        let masked = left_partials_from_secret(&products, left, &mut self.counter)?;
        let mut al = Vec::with_capacity(d);
        for (p, m_fwd) in partials.iter().zip(&masked) {
            al.push(mat_sub(p, m_fwd)?);
        }
        self.al = Some(PrecomputedLeft::new(al));
        self.fwd = products.into_fwd();
        self.levels = Vec::new();
        self.phase = Phase::Ready;
        Ok(())
    }

    fn start_online(
        &mut self,
        b: &DenseMatrix,
        kind: PendingKind,
        retain_b: bool,
    ) -> Result<Message, Error> {
        if self.phase != Phase::Ready && self.phase != Phase::SentAEnc {
            return Err(Error::Phase {
                expected: "ready or sent-a-enc",
                got: phase_name(self.phase),
            });
        }
        if self.pending.is_some() {
            return Err(Error::Phase {
                expected: "no online step in flight",
                got: "pending reply",
            });
        }
        if b.rows() != self.schedule.dim(0) {
            return Err(Error::Parameter(format!(
                "right operand has {} rows, schedule expects {}",
                b.rows(),
                self.schedule.dim(0)
            )));
        }
        let right = RightMaskSecret::sample(b.cols(), &self.schedule, &mut self.rng);
        let fwd: &[DenseMatrix] = match &self.products {
            Some(p) => p.fwd_all(),
            None => &self.fwd,
        };
        let b_prime =
            crate::trapdoor::expand_right_mask_from_table(fwd, &right, &mut self.counter)?;
        let b_enc = mat_add(b, &b_prime)?;
        self.pending = Some(PendingOnline {
            source: MaskSource::Secret(right),
            b_enc: b_enc.clone(),
            b: retain_b.then(|| b.clone()),
            kind,
        });
        Ok(Message {
            session: self.session,
            body: Body::OnlineRequest { b_enc },
        })
    }

    /// Masks `B` and returns the online request. Legal as soon as the chain
    /// products are verified, so a once-off multiplication can batch this
    /// with the masked upload and finish init and the product in one round
    /// trip each way.
    pub fn client_online(&mut self, b: &DenseMatrix) -> Result<Message, Error> {
        let retain = self.check_output;
        self.start_online(b, PendingKind::Standard, retain)
    }

    /// Masks `B` with a precomputed generator pair instead of fresh
    /// trapdoor sampling: the per-step client cost drops to additions plus
    /// the unmask corrections.
    pub fn client_online_with_pair(
        &mut self,
        b: &DenseMatrix,
        pair: (DenseMatrix, DenseMatrix),
    ) -> Result<Message, Error> {
        self.expect_phase(Phase::Ready, "ready")?;
        if self.pending.is_some() {
            return Err(Error::Phase {
                expected: "no online step in flight",
                got: "pending reply",
            });
        }
        let (b_prime, ab_prime) = pair;
        if b_prime.shape() != b.shape() {
            return Err(Error::Parameter(format!(
                "mask block is {:?} but the operand is {:?}",
                b_prime.shape(),
                b.shape()
            )));
        }
        if ab_prime.shape() != (self.a.rows(), b.cols()) {
            return Err(Error::Parameter(format!(
                "product block is {:?}, expected {:?}",
                ab_prime.shape(),
                (self.a.rows(), b.cols())
            )));
        }
        let b_enc = mat_add(b, &b_prime)?;
        self.pending = Some(PendingOnline {
            source: MaskSource::Pair { ab_prime },
            b_enc: b_enc.clone(),
            b: self.check_output.then(|| b.clone()),
            kind: PendingKind::Standard,
        });
        Ok(Message {
            session: self.session,
            body: Body::OnlineRequest { b_enc },
        })
    }

    /// Parses an online reply and returns the unmasked correction pieces.
    fn unmask_reply(
        &mut self,
        reply: &Message,
        pending: &PendingOnline,
    ) -> Result<(DenseMatrix, DenseMatrix), Error> {
        let (y0, probes) = match &reply.body {
            Body::OnlineReply { y0, probes } => (y0, probes),
            other => {
                return Err(Error::MalformedMessage(format!(
                    "expected online-reply, got {}",
                    other.kind_name()
                )))
            }
        };
        let d = self.schedule.depth();
        let l = pending.b_enc.cols();
        let m = self.a.rows();
        if y0.shape() != (m, l) {
            return Err(Error::MalformedMessage(format!(
                "product has shape {:?}, expected {:?}",
                y0.shape(),
                (m, l)
            )));
        }
        if probes.len() != d {
            return Err(Error::MalformedMessage(format!(
                "expected {d} probes, got {}",
                probes.len()
            )));
        }
        for (i, p) in probes.iter().enumerate() {
            let want = (self.schedule.dim(i + 1), l);
            if p.shape() != want {
                return Err(Error::MalformedMessage(format!(
                    "probe {} has shape {:?}, expected {want:?}",
                    i + 1,
                    p.shape()
                )));
            }
        }

        let ab_prime = match &pending.source {
            MaskSource::Secret(right) => {
                let al = self.al.as_ref().expect("ready phase has retained products");
                fast_ab_prime(&self.a, al, right, &mut self.counter)?
            }
            MaskSource::Pair { ab_prime } => ab_prime.clone(),
        };
        let left = self.left.as_ref().expect("ready phase has the trapdoor");
        let aprime_benc =
            fast_aprime_benc(left, &pending.b_enc, probes, &mut self.counter)?;
        let ab = mat_sub(&mat_sub(y0, &ab_prime)?, &aprime_benc)?;
        Ok((ab, ab_prime))
    }

    /// Unmasks an online reply into `A B`. Requires the init to have fully
    /// completed; aborts on a malformed reply or a failed output check.
    pub fn client_online_finish(&mut self, reply: &Message) -> Result<DenseMatrix, Error> {
        self.expect_phase(Phase::Ready, "ready")?;
        self.take_reply(reply)?;
        let pending = self.pending.take().ok_or(Error::Phase {
            expected: "online step in flight",
            got: "idle",
        })?;
        if let PendingKind::Generator { .. } = pending.kind {
            return Err(Error::Phase {
                expected: "generator step in flight",
                got: "plain online finish",
            });
        }
        let (ab, _) = match self.unmask_reply(reply, &pending) {
            Ok(v) => v,
            Err(e) => {
                self.abort();
                return Err(e);
            }
        };
        if let Some(b) = &pending.b {
            let mut cfg = CheckConfig::new(self.schedule.lambda_prime(), self.rng.fork());
            let ok = freivalds_check(&self.a, b, &ab, &mut cfg, &mut self.counter)?;
            if !ok {
                self.abort();
                return Err(Error::DishonestServer {
                    stage: "online product",
                });
            }
        }
        Ok(ab)
    }

    /// Delegates one wide all-zero product whose mask and correction become
    /// `t` precomputed pairs of width `l`. The expected result is exactly
    /// zero, so the reply that builds the generator is also a free audit.
    pub fn generator_start(&mut self, t: usize, l: usize) -> Result<Message, Error> {
        if t == 0 || l == 0 {
            return Err(Error::Parameter("generator needs t >= 1 and l >= 1".into()));
        }
        let b = DenseMatrix::zeros(self.schedule.dim(0), t * l);
        self.start_online(&b, PendingKind::Generator { t, l }, false)
    }

    /// Unmasks the generator reply. The zero check catches any deviation in
    /// this reply; the pairs would otherwise silently poison `t` future
    /// results.
    pub fn generator_finish(&mut self, reply: &Message) -> Result<TargetedGenerator, Error> {
        self.expect_phase(Phase::Ready, "ready")?;
        self.take_reply(reply)?;
        let pending = self.pending.take().ok_or(Error::Phase {
            expected: "generator step in flight",
            got: "idle",
        })?;
        let (t, l) = match pending.kind {
            PendingKind::Generator { t, l } => (t, l),
            PendingKind::Standard => {
                return Err(Error::Phase {
                    expected: "plain online step in flight",
                    got: "generator finish",
                })
            }
        };
        let (ab, ab_prime) = match self.unmask_reply(reply, &pending) {
            Ok(v) => v,
            Err(e) => {
                self.abort();
                return Err(e);
            }
        };
        if !ab.is_zero() {
            self.abort();
            return Err(Error::DishonestServer { stage: "zero audit" });
        }
        targeted_generator(pending.b_enc, ab_prime, t, l)
    }
}

/// Client state for the single-level protocol: one uniform `n x n1` factor
/// `L` instead of a chain, quadratic-size secrets, no product table and no
/// init round trips beyond shipping `A_enc`.
pub struct SimpleClientState {
    a: DenseMatrix,
    l_mat: DenseMatrix,
    h: DenseMatrix,
    s: SparseMatrix,
    al: DenseMatrix,
    a_enc_l: DenseMatrix,
    mu: NoiseRate,
    rng: SeededRng,
    counter: OpCounter,
}

/// Single-level init: masks `A` with `H L^T + S` and precomputes `A L` and
/// `A_enc L`, the latter from the identity `A_enc L = A L + H (L^T L) + S L`
/// so it never costs a second full product.
pub fn simple_init(
    a: DenseMatrix,
    n1: usize,
    mu: NoiseRate,
    mut rng: SeededRng,
) -> Result<(SimpleClientState, DenseMatrix), Error> {
    let n = a.cols();
    if n1 == 0 || n1 >= n {
        return Err(Error::Parameter(format!(
            "inner dimension must be in 1..{n}, got {n1}"
        )));
    }
    let m = a.rows();
    let mut counter = OpCounter::new();
    let l_mat = sample_uniform(n, n1, &mut rng);
    let h = sample_uniform(m, n1, &mut rng);
    let s = sample_noise(m, n, mu, &mut rng);

    let al = mat_mul(&a, &l_mat, &mut counter)?;
    let ltl = mat_mul(&transpose(&l_mat), &l_mat, &mut counter)?;
    let hltl = mat_mul(&h, &ltl, &mut counter)?;
    let sl = sparse_dense_mul(&s, &l_mat, &mut counter)?;
    let a_enc_l = mat_add(&mat_add(&al, &hltl)?, &sl)?;

    let a_prime = mat_mul(&h, &transpose(&l_mat), &mut counter)?;
    let a_prime = add_sparse_into(a_prime, &s)?;
    let a_enc = mat_add(&a, &a_prime)?;

    Ok((
        SimpleClientState {
            a,
            l_mat,
            h,
            s,
            al,
            a_enc_l,
            mu,
            rng,
            counter,
        },
        a_enc,
    ))
}

impl SimpleClientState {
    pub fn ops(&self) -> OpCounter {
        self.counter
    }

    /// `A L`, retained from init.
    pub fn al(&self) -> &DenseMatrix {
        &self.al
    }

    /// `A_enc L`, retained from init.
    pub fn a_enc_l(&self) -> &DenseMatrix {
        &self.a_enc_l
    }
}

impl Drop for SimpleClientState {
    fn drop(&mut self) {
        for w in self.h.data_mut() {
            *w = 0;
        }
        let entries = self.s.entries_mut();
        for e in entries.iter_mut() {
            e.value = 0;
        }
        entries.clear();
    }
}

/// One delegated product under the single-level protocol. `server` gets the
/// masked operand and must return `A_enc B_enc`; the unmasking mirrors the
/// chained protocol with `L` in place of the whole chain.
pub fn simple_mul<F>(
    state: &mut SimpleClientState,
    b: &DenseMatrix,
    server: F,
) -> Result<DenseMatrix, Error>
where
    F: FnOnce(&DenseMatrix) -> Result<DenseMatrix, Error>,
{
    let n = state.a.cols();
    if b.rows() != n {
        return Err(Error::Parameter(format!(
            "right operand has {} rows, expected {n}",
            b.rows()
        )));
    }
    let l = b.cols();
    let n1 = state.l_mat.cols();
    let g = sample_uniform(n1, l, &mut state.rng);
    let t = sample_noise(n, l, state.mu, &mut state.rng);
    let b_prime = mat_mul(&state.l_mat, &g, &mut state.counter)?;
    let b_prime = add_sparse_into(b_prime, &t)?;
    let b_enc = mat_add(b, &b_prime)?;

    let y0 = server(&b_enc)?;
    if y0.shape() != (state.a.rows(), l) {
        return Err(Error::MalformedMessage(format!(
            "product has shape {:?}, expected {:?}",
            y0.shape(),
            (state.a.rows(), l)
        )));
    }

    let ab_prime = {
        let alg = mat_mul(&state.al, &g, &mut state.counter)?;
        let at = dense_sparse_mul(&state.a, &t, &mut state.counter)?;
        mat_add(&alg, &at)?
    };
    let aprime_benc = {
        let probe = mat_mul(&transpose(&state.l_mat), &b_enc, &mut state.counter)?;
        let hp = mat_mul(&state.h, &probe, &mut state.counter)?;
        let sb = sparse_dense_mul(&state.s, &b_enc, &mut state.counter)?;
        mat_add(&hp, &sb)?
    };
    mat_sub(&mat_sub(&y0, &ab_prime)?, &aprime_benc)
}

/// Ways a test server can lie. Real servers are never constructed with one
/// of these; the adversarial paths exist so the client's checks can be
/// exercised end to end.
#[derive(Clone, Copy, Debug)]
pub enum Deviation {
    /// Corrupt one entry of one matrix in the chain-products reply.
    ChainEntry,
    /// Corrupt one entry of one masked partial product.
    AEncPartialEntry,
    /// Corrupt each online reply independently with this probability.
    OnlineRate(Ratio),
    /// Corrupt every online reply.
    OnlineAlways,
}

/// Server half of a delegation session. Holds only what the client sent:
/// the public chain (with cached transposes for the probe ladder) and the
/// masked operand.
pub struct ServerSession {
    session: SessionId,
    levels: Vec<DenseMatrix>,
    levels_t: Vec<DenseMatrix>,
    a_enc: Option<DenseMatrix>,
    counter: OpCounter,
    deviation: Option<Deviation>,
    dev_rng: SeededRng,
}

impl ServerSession {
    pub fn new(session: SessionId) -> Self {
        ServerSession {
            session,
            levels: Vec::new(),
            levels_t: Vec::new(),
            a_enc: None,
            counter: OpCounter::new(),
            deviation: None,
            dev_rng: SeededRng::from_u64(0),
        }
    }

    /// Test-only constructor for a lying server.
    pub fn with_deviation(session: SessionId, deviation: Deviation, seed: u64) -> Self {
        let mut s = ServerSession::new(session);
        s.deviation = Some(deviation);
        s.dev_rng = SeededRng::from_u64(seed);
        s
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn ops(&self) -> OpCounter {
        self.counter
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn has_operand(&self) -> bool {
        self.a_enc.is_some()
    }

    fn corrupt_entry(&mut self, m: &mut DenseMatrix) {
        if m.rows() == 0 || m.cols() == 0 {
            return;
        }
        let r = self.dev_rng.below(m.rows() as u64) as usize;
        let c = self.dev_rng.below(m.cols() as u64) as usize;
        let delta = 1 + self.dev_rng.next_word() % 0x7fff_ffff;
        m.set(r, c, m.get(r, c).wrapping_add(delta));
    }
}

/// Handles a chain upload: computes every forward product and the gram
/// table and sends them back. The session must be fresh.
pub fn server_on_chain(
    sess: &mut ServerSession,
    levels: Vec<DenseMatrix>,
) -> Result<Message, Error> {
    if !sess.levels.is_empty() || sess.a_enc.is_some() {
        return Err(Error::Phase {
            expected: "fresh session",
            got: "chain already set",
        });
    }
    let products = ChainProducts::compute(&levels, &mut sess.counter)?;
    sess.levels_t = levels.iter().map(transpose).collect();
    sess.levels = levels;
    let mut fwd = products.fwd_all().to_vec();
    let mut upper = products.upper().to_vec();
    if let Some(Deviation::ChainEntry) = sess.deviation {
        let total = fwd.len() + upper.len();
        let pick = sess.dev_rng.below(total as u64) as usize;
        let target = if pick < fwd.len() {
            &mut fwd[pick]
        } else {
            &mut upper[pick - fwd.len()]
        };
        let mut stolen = std::mem::replace(target, DenseMatrix::zeros(0, 0));
        sess.corrupt_entry(&mut stolen);
        *target = stolen;
    }
    Ok(Message {
        session: sess.session,
        body: Body::ChainProductsReply { fwd, upper },
    })
}

/// Handles the masked upload: stores it and returns its per-level products,
/// computed by iterated right-multiplication. A session with no chain is
/// legal and serves the single-level protocol; its reply is an empty list.
pub fn server_on_aenc(sess: &mut ServerSession, a_enc: DenseMatrix) -> Result<Message, Error> {
    if sess.a_enc.is_some() {
        return Err(Error::Phase {
            expected: "no masked operand yet",
            got: "operand already set",
        });
    }
    if let Some(first) = sess.levels.first() {
        if a_enc.cols() != first.rows() {
            return Err(Error::MalformedMessage(format!(
                "masked operand has {} columns but the chain starts at {}",
                a_enc.cols(),
                first.rows()
            )));
        }
    }
    let mut partials: Vec<DenseMatrix> = Vec::with_capacity(sess.levels.len());
    for (i, level) in sess.levels.iter().enumerate() {
        let prev = if i == 0 { &a_enc } else { &partials[i - 1] };
        partials.push(mat_mul(prev, level, &mut sess.counter)?);
    }
    if let Some(Deviation::AEncPartialEntry) = sess.deviation {
        if !partials.is_empty() {
            let pick = sess.dev_rng.below(partials.len() as u64) as usize;
            let mut stolen = std::mem::replace(&mut partials[pick], DenseMatrix::zeros(0, 0));
            sess.corrupt_entry(&mut stolen);
            partials[pick] = stolen;
        }
    }
    sess.a_enc = Some(a_enc);
    Ok(Message {
        session: sess.session,
        body: Body::AEncPartialsReply { partials },
    })
}

/// Handles an online request: the heavy product plus the probe ladder,
/// `probes[i-1] = L_i^T probes[i-2]`, so the extra work stays near
/// `l n n_1`, far below the product itself.
pub fn server_on_online(sess: &mut ServerSession, b_enc: &DenseMatrix) -> Result<Message, Error> {
    let a_enc = sess.a_enc.as_ref().ok_or(Error::Phase {
        expected: "masked operand set",
        got: "no operand",
    })?;
    if b_enc.rows() != a_enc.cols() {
        return Err(Error::MalformedMessage(format!(
            "right operand has {} rows, expected {}",
            b_enc.rows(),
            a_enc.cols()
        )));
    }
    let mut y0 = mat_mul(a_enc, b_enc, &mut sess.counter)?;
    let mut probes: Vec<DenseMatrix> = Vec::with_capacity(sess.levels_t.len());
    for (i, lt) in sess.levels_t.iter().enumerate() {
        let prev = if i == 0 { b_enc } else { &probes[i - 1] };
        probes.push(mat_mul(lt, prev, &mut sess.counter)?);
    }

    let lie = match sess.deviation {
        Some(Deviation::OnlineAlways) => true,
        Some(Deviation::OnlineRate(r)) => {
            let rate = NoiseRate::new(r).map_err(|e| {
                Error::Parameter(format!("bad deviation rate: {e}"))
            })?;
            sess.dev_rng.bernoulli(rate)
        }
        _ => false,
    };
    if lie {
        let pick = sess.dev_rng.below((1 + probes.len()) as u64) as usize;
        if pick == 0 {
            sess.corrupt_entry(&mut y0);
        } else {
            let mut stolen = std::mem::replace(&mut probes[pick - 1], DenseMatrix::zeros(0, 0));
            sess.corrupt_entry(&mut stolen);
            probes[pick - 1] = stolen;
        }
    }
    Ok(Message {
        session: sess.session,
        body: Body::OnlineReply { y0, probes },
    })
}

/// Routes one client message to the matching handler, enforcing the session
/// id. Abort bodies come back as transport errors; a server never processes
/// them as work.
pub fn server_handle(sess: &mut ServerSession, msg: Message) -> Result<Message, Error> {
    if msg.session != sess.session {
        return Err(Error::SessionMismatch);
    }
    match msg.body {
        Body::ChainUpload { levels } => server_on_chain(sess, levels),
        Body::AEncUpload { a_enc } => server_on_aenc(sess, a_enc),
        Body::OnlineRequest { b_enc } => server_on_online(sess, &b_enc),
        Body::Abort { reason } => Err(Error::Transport(format!("peer aborted: {reason}"))),
        other => Err(Error::MalformedMessage(format!(
            "server cannot handle {}",
            other.kind_name()
        ))),
    }
}
