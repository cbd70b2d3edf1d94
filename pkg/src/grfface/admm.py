"""Consensus training of the squared-hinge linear SVM over sample blocks.

The pair pool is split into ``m`` blocks (negatives partitioned from a
seeded shuffle, positives bootstrap-sampled per block when a quota is set).
Each round every block solves its proximal subproblem

    min_w  C * sum_{i in B_j} max(1 - y_i w'x_i, 0)^2 + rho * ||w - z + u_j||^2

by damped Newton with conjugate-gradient inner solves on the generalized
Hessian; the coordinator then refreshes the consensus weights

    z = 2 rho * sum_j (w_j + u_j) / (1 + 2 rho m)

(the closed-form minimizer of z'z/2 + rho * sum_j ||w_j - z + u_j||^2),
updates the scaled duals u_j += w_j - z, and stops once primal and dual
residuals fall under their tolerances.

Workers hold their samples locally; the only traffic is the consensus
vector out and the block weights back, over an in-process transport or a
framed TCP protocol (see ``pack_frame`` and the message codecs). Both
transports run the identical arithmetic and produce identical iterates.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

PROTO_VERSION = 1

TAG_HELLO = 0x01
TAG_CONFIG = 0x02
TAG_ROUND_Z = 0x03
TAG_LOCAL_W = 0x04
TAG_DONE = 0x05
TAG_ABORT = 0x06

ABORT_PROTO_MISMATCH = 1
ABORT_TIMEOUT = 2
ABORT_FAILURE = 3


@dataclass
class AdmmConfig:
    C: float = 1.0
    rho: float = 1.0
    blocks: int = 1
    max_rounds: int = 50
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    seed: int = 0
    pos_quota: int | None = None
    neg_quota: int | None = None
    timeout: float = 120.0

    def __post_init__(self):
        if self.C <= 0 or self.rho <= 0:
            raise ValueError("C and rho must be positive")
        if self.blocks < 1 or self.max_rounds < 1:
            raise ValueError("blocks and max_rounds must be at least 1")


@dataclass
class BlockAssignment:
    block_id: int
    indices: np.ndarray  # into the pair pool
    locality: str = "local"


def partition_blocks(labels, config: AdmmConfig) -> list[BlockAssignment]:
    """Assign pool indices to blocks: negatives split a seeded shuffle
    without replacement, positives bootstrap to the quota (all positives to
    every block when no quota is set)."""
    y = np.asarray(labels)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == -1)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("pair pool needs both labels")
    m = config.blocks
    rng = np.random.default_rng(config.seed)
    neg_quota = config.neg_quota if config.neg_quota is not None else neg.size // m
    if m * neg_quota > neg.size:
        raise ValueError(
            f"quota-exceeds-pool: {m} x {neg_quota} negatives from a pool of {neg.size}"
        )
    shuffled = rng.permutation(neg)
    blocks = []
    for j in range(m):
        neg_part = shuffled[j * neg_quota : (j + 1) * neg_quota]
        if config.pos_quota is not None:
            pos_part = rng.choice(pos, size=config.pos_quota, replace=True)
        else:
            pos_part = pos.copy()
        blocks.append(BlockAssignment(j, np.concatenate([pos_part, neg_part])))
    return blocks


# ---------------------------------------------------------------------------
# Local block solver: damped Newton with CG inner solves.

def _prox_value(w, x, y, C, rho, v):
    margins = 1.0 - y * (x @ w)
    hinge = np.maximum(margins, 0.0)
    diff = w - v
    return C * np.sum(hinge * hinge) + rho * diff @ diff


def prox_solve(x, y, C, rho, v, w0=None, tol=1e-8, max_newton=60):
    """Minimize C * sum(max(1 - y w'x, 0)^2) + rho * ||w - v||^2.

    The squared hinge is once differentiable; Newton steps use the
    generalized Hessian 2C X_a'X_a + 2 rho I restricted to active rows,
    solved by conjugate gradients, with Armijo backtracking on the exact
    objective. Terminates at gradient norm <= tol.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    w = np.array(v, dtype=np.float64) if w0 is None else np.array(w0, dtype=np.float64)
    yx_w = y * (x @ w)
    for _ in range(max_newton):
        if not np.all(np.isfinite(yx_w)):
            raise FloatingPointError("numerical-failure: non-finite block margins")
        margins = 1.0 - yx_w
        active = margins > 0
        grad = 2.0 * rho * (w - v)
        if active.any():
            grad -= 2.0 * C * ((y * margins)[active] @ x[active])
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol or not np.isfinite(gnorm):
            break
        xa = x[active]

        def hess_vec(p):
            return 2.0 * C * (xa.T @ (xa @ p)) + 2.0 * rho * p

        # CG on H step = -grad with an inexact forcing tolerance
        step = np.zeros(d)
        resid = -grad.copy()
        direction = resid.copy()
        rr = resid @ resid
        cg_tol = (min(0.5, np.sqrt(gnorm)) * gnorm) ** 2
        for _ in range(d + 20):
            hp = hess_vec(direction)
            alpha = rr / (direction @ hp)
            step += alpha * direction
            resid -= alpha * hp
            rr_new = resid @ resid
            if rr_new <= cg_tol:
                break
            direction = resid + (rr_new / rr) * direction
            rr = rr_new
        # Armijo backtracking on the exact objective
        f0 = C * np.sum(np.maximum(1.0 - yx_w, 0.0) ** 2) + rho * (w - v) @ (w - v)
        slope = grad @ step
        t = 1.0
        while t > 1e-12:
            w_try = w + t * step
            if _prox_value(w_try, x, y, C, rho, v) <= f0 + 1e-4 * t * slope:
                break
            t *= 0.5
        w = w + t * step
        yx_w = y * (x @ w)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("numerical-failure: non-finite block weights")
    return w


def solve_local(x, y, z, u, config: AdmmConfig, w0=None):
    """Block subproblem at consensus z and scaled dual u."""
    v = z - u
    tol = 1e-6 * (1.0 + np.linalg.norm(z))
    return prox_solve(x, y, config.C, config.rho, v, w0=w0, tol=tol)


def newton_solve(x, y, C, tol=1e-9):
    """Direct whole-dataset minimizer of w'w/2 + C * sum hinge^2 (the
    single-machine reference the consensus result is checked against)."""
    d = np.asarray(x).shape[1]
    return prox_solve(x, y, C, 0.5, np.zeros(d), w0=np.zeros(d), tol=tol)


def block_objective(x, y, w, C):
    """Data term of one block at w (reported per round for the log)."""
    hinge = np.maximum(1.0 - np.asarray(y) * (np.asarray(x) @ w), 0.0)
    return float(C * np.sum(hinge * hinge))


# ---------------------------------------------------------------------------
# Consensus state and round update (shared by every driver).

@dataclass
class ConsensusState:
    z: np.ndarray
    u: np.ndarray  # (m, D) scaled duals
    w: np.ndarray | None = None  # (m, D) block weights, None before round 1
    round: int = 0
    r: float = np.inf
    s: float = np.inf
    eps_pri: float = 0.0
    eps_dual: float = 0.0
    converged: bool = False
    flag: str | None = None


def init_state(m: int, dim: int) -> ConsensusState:
    return ConsensusState(z=np.zeros(dim), u=np.zeros((m, dim)))


def _consensus_update(w_stack, u, z_prev, config: AdmmConfig):
    """z-update, dual update, and residuals after gathering block weights."""
    m, dim = w_stack.shape
    rho = config.rho
    z = 2.0 * rho * np.sum(w_stack + u, axis=0) / (1.0 + 2.0 * rho * m)
    u_new = u + (w_stack - z)
    r = float(np.sqrt(np.sum((w_stack - z) ** 2)))
    s = 2.0 * rho * np.sqrt(m) * float(np.linalg.norm(z - z_prev))
    eps_pri = np.sqrt(m * dim) * config.eps_abs + config.eps_rel * max(
        float(np.sqrt(np.sum(w_stack * w_stack))),
        float(np.sqrt(m) * np.linalg.norm(z)),
    )
    eps_dual = np.sqrt(dim) * config.eps_abs + config.eps_rel * 2.0 * rho * float(
        np.linalg.norm(u_new.sum(axis=0))
    )
    converged = r <= eps_pri and s <= eps_dual
    return z, u_new, r, s, eps_pri, eps_dual, converged


def consensus_round(state: ConsensusState, blocks, config: AdmmConfig) -> ConsensusState:
    """One synchronous round over in-process blocks [(x_j, y_j), ...]."""
    m = len(blocks)
    dim = state.z.shape[0]
    w_stack = np.empty((m, dim), dtype=np.float64)
    for j, (x, y) in enumerate(blocks):
        w0 = state.z - state.u[j] if state.w is None else state.w[j]
        w_stack[j] = solve_local(x, y, state.z, state.u[j], config, w0=w0)
    z, u_new, r, s, ep, ed, conv = _consensus_update(w_stack, state.u, state.z, config)
    return ConsensusState(
        z=z, u=u_new, w=w_stack, round=state.round + 1,
        r=r, s=s, eps_pri=ep, eps_dual=ed, converged=conv,
    )


@dataclass
class RoundStats:
    round: int
    r: float
    s: float
    eps_pri: float
    eps_dual: float
    data_objective: float


@dataclass
class TrainingReport:
    rounds: int
    history: list[RoundStats]
    consensus_gap: float  # max_j ||w_j - z||_inf at the final round
    flag: str | None = None


# ---------------------------------------------------------------------------
# Workers and transports.

class BlockWorker:
    """Holds one block's samples and the worker-side ADMM state."""

    def __init__(self, block_id: int, x, y):
        self.block_id = block_id
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.config: AdmmConfig | None = None
        self.u: np.ndarray | None = None
        self.w: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def configure(self, config: AdmmConfig) -> None:
        self.config = config
        self.u = np.zeros(self.dim)
        self.w = None

    def on_round(self, z: np.ndarray) -> tuple[np.ndarray, float]:
        if self.w is not None:
            self.u = self.u + (self.w - z)
            w0 = self.w
        else:
            w0 = z - self.u
        self.w = solve_local(self.x, self.y, z, self.u, self.config, w0=w0)
        return self.w, block_objective(self.x, self.y, self.w, self.config.C)


class InProcessTransport:
    """Message-passing semantics without sockets: same calls, same order."""

    def __init__(self, workers: list[BlockWorker]):
        self.workers = sorted(workers, key=lambda w: w.block_id)

    def configure(self, config: AdmmConfig) -> None:
        for wk in self.workers:
            wk.configure(config)

    def do_round(self, rnd: int, z: np.ndarray):
        dim = z.shape[0]
        w_stack = np.empty((len(self.workers), dim))
        objs = []
        for wk in self.workers:
            w, obj = wk.on_round(z)
            w_stack[wk.block_id] = w
            objs.append(obj)
        return w_stack, objs

    def finish(self, rounds: int) -> None:
        pass

    def abort(self, code: int) -> None:
        pass


def _drive(transport, m: int, dim: int, config: AdmmConfig):
    """Coordinator loop shared by the in-process and socket transports."""
    z = np.zeros(dim)
    u = np.zeros((m, dim))
    w_stack = np.zeros((m, dim))
    history: list[RoundStats] = []
    converged = False
    rounds = 0
    for rnd in range(1, config.max_rounds + 1):
        w_stack, objs = transport.do_round(rnd, z)
        z, u, r, s, ep, ed, converged = _consensus_update(w_stack, u, z, config)
        history.append(RoundStats(rnd, r, s, ep, ed, float(sum(objs))))
        rounds = rnd
        if converged:
            break
    transport.finish(rounds)
    gap = float(np.max(np.abs(w_stack - z))) if rounds else np.inf
    report = TrainingReport(
        rounds=rounds,
        history=history,
        consensus_gap=gap,
        flag=None if converged else "max-rounds",
    )
    return z, report


def train_consensus(blocks, config: AdmmConfig):
    """In-process consensus training over blocks [(x_j, y_j), ...]."""
    workers = [BlockWorker(j, x, y) for j, (x, y) in enumerate(blocks)]
    dim = workers[0].dim
    transport = InProcessTransport(workers)
    transport.configure(config)
    return _drive(transport, len(blocks), dim, config)


# ---------------------------------------------------------------------------
# Wire protocol: frame = u32 length (tag + payload), u8 tag, payload (LE).

def pack_frame(tag: int, payload: bytes = b"") -> bytes:
    return struct.pack("<IB", 1 + len(payload), tag) + payload


def encode_hello(dim: int, block_id: int, proto: int = PROTO_VERSION) -> bytes:
    return pack_frame(TAG_HELLO, struct.pack("<III", proto, dim, block_id))


def encode_config(config: AdmmConfig) -> bytes:
    payload = struct.pack(
        "<ddIdd", config.C, config.rho, config.max_rounds, config.eps_abs, config.eps_rel
    )
    return pack_frame(TAG_CONFIG, payload)


def encode_round_z(rnd: int, z: np.ndarray) -> bytes:
    return pack_frame(TAG_ROUND_Z, struct.pack("<I", rnd) + _vec_bytes(z))


def encode_local_w(rnd: int, w: np.ndarray, objective: float) -> bytes:
    payload = struct.pack("<I", rnd) + _vec_bytes(w) + struct.pack("<d", objective)
    return pack_frame(TAG_LOCAL_W, payload)


def encode_done(rounds: int) -> bytes:
    return pack_frame(TAG_DONE, struct.pack("<I", rounds))


def encode_abort(code: int) -> bytes:
    return pack_frame(TAG_ABORT, struct.pack("<H", code))


def _vec_bytes(v: np.ndarray) -> bytes:
    return np.ascontiguousarray(v, dtype="<f8").tobytes()


def _vec_from(buf: bytes) -> np.ndarray:
    return np.frombuffer(buf, dtype="<f8").copy()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    body = _recv_exact(sock, length)
    return body[0], body[1:]


def run_worker(address: tuple[str, int], block_id: int, x, y) -> int:
    """Socket worker: connect, announce the resident block, serve rounds.

    Returns the number of rounds served. Sample data never leaves the
    process; only weight vectors cross the connection.
    """
    worker = BlockWorker(block_id, x, y)
    with socket.create_connection(address) as sock:
        sock.sendall(encode_hello(worker.dim, block_id))
        tag, payload = recv_frame(sock)
        if tag == TAG_ABORT:
            (code,) = struct.unpack("<H", payload)
            raise ConnectionError(f"coordinator aborted with code {code}")
        if tag != TAG_CONFIG:
            raise ValueError(f"expected CONFIG frame, got tag {tag:#x}")
        c, rho, max_rounds, eps_abs, eps_rel = struct.unpack("<ddIdd", payload)
        worker.configure(AdmmConfig(C=c, rho=rho, max_rounds=max_rounds,
                                    eps_abs=eps_abs, eps_rel=eps_rel))
        while True:
            tag, payload = recv_frame(sock)
            if tag == TAG_ROUND_Z:
                (rnd,) = struct.unpack("<I", payload[:4])
                z = _vec_from(payload[4:])
                w, obj = worker.on_round(z)
                sock.sendall(encode_local_w(rnd, w, obj))
            elif tag == TAG_DONE:
                (rounds,) = struct.unpack("<I", payload)
                return rounds
            elif tag == TAG_ABORT:
                (code,) = struct.unpack("<H", payload)
                raise ConnectionError(f"coordinator aborted with code {code}")
            else:
                raise ValueError(f"unexpected frame tag {tag:#x}")


class SocketTransport:
    def __init__(self, conns: dict[int, socket.socket], timeout: float):
        self.conns = conns
        self.timeout = timeout

    def do_round(self, rnd: int, z: np.ndarray):
        m = len(self.conns)
        dim = z.shape[0]
        frame = None
        for j in sorted(self.conns):
            frame = encode_round_z(rnd, z)
            self.conns[j].sendall(frame)
        w_stack = np.empty((m, dim))
        objs = [0.0] * m
        for j in sorted(self.conns):
            tag, payload = self._recv_retry(self.conns[j])
            if tag != TAG_LOCAL_W:
                self.abort(ABORT_FAILURE)
                raise ValueError(f"expected LOCAL_W from block {j}, got tag {tag:#x}")
            (got_rnd,) = struct.unpack("<I", payload[:4])
            if got_rnd != rnd:
                self.abort(ABORT_FAILURE)
                raise ValueError(f"block {j} answered round {got_rnd}, expected {rnd}")
            w_stack[j] = _vec_from(payload[4:-8])
            (objs[j],) = struct.unpack("<d", payload[-8:])
        return w_stack, objs

    def _recv_retry(self, sock: socket.socket):
        sock.settimeout(self.timeout)
        try:
            return recv_frame(sock)
        except socket.timeout:
            try:
                return recv_frame(sock)  # one retry window
            except socket.timeout:
                self.abort(ABORT_TIMEOUT)
                raise TimeoutError("worker timed out twice; training aborted")

    def finish(self, rounds: int) -> None:
        for j in sorted(self.conns):
            self.conns[j].sendall(encode_done(rounds))

    def abort(self, code: int) -> None:
        for conn in self.conns.values():
            try:
                conn.sendall(encode_abort(code))
            except OSError:
                pass


def run_coordinator(listen_sock: socket.socket, n_workers: int, dim: int,
                    config: AdmmConfig):
    """Socket coordinator: accept workers, verify handshakes, run rounds.

    ``listen_sock`` must already be bound and listening; block ids announced
    by the workers must cover 0..n_workers-1.
    """
    conns: dict[int, socket.socket] = {}
    try:
        for _ in range(n_workers):
            conn, _addr = listen_sock.accept()
            conn.settimeout(config.timeout)
            tag, payload = recv_frame(conn)
            if tag != TAG_HELLO:
                raise ValueError(f"expected HELLO frame, got tag {tag:#x}")
            proto, got_dim, block_id = struct.unpack("<III", payload)
            if proto != PROTO_VERSION:
                conn.sendall(encode_abort(ABORT_PROTO_MISMATCH))
                raise ValueError(
                    f"protocol-mismatch: worker speaks v{proto}, expected v{PROTO_VERSION}"
                )
            if got_dim != dim:
                conn.sendall(encode_abort(ABORT_FAILURE))
                raise ValueError(f"dim-mismatch: worker block {block_id} has D={got_dim}")
            if block_id in conns or not 0 <= block_id < n_workers:
                conn.sendall(encode_abort(ABORT_FAILURE))
                raise ValueError(f"bad block id {block_id}")
            conns[block_id] = conn
        for j in sorted(conns):
            conns[j].sendall(encode_config(config))
        transport = SocketTransport(conns, config.timeout)
        return _drive(transport, n_workers, dim, config)
    finally:
        for conn in conns.values():
            conn.close()


def train_distributed(x, y, config: AdmmConfig, topology: str = "in-process",
                      listen: tuple[str, int] | None = None):
    """Partition the pool and train; returns (z, report, blocks).

    ``topology`` is "in-process" (blocks solved as local tasks) or
    "sockets" (coordinator listens on ``listen``; callers start one
    ``run_worker`` per block with the matching block data).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    assignments = partition_blocks(y, config)
    blocks = [(x[a.indices], y[a.indices].astype(np.float64)) for a in assignments]
    if topology == "in-process":
        z, report = train_consensus(blocks, config)
        return z, report, assignments
    if topology == "sockets":
        if listen is None:
            raise ValueError("socket topology needs a listen address")
        import threading

        srv = socket.create_server(listen)
        try:
            port = srv.getsockname()[1]
            threads = []
            for j, (bx, by) in enumerate(blocks):
                t = threading.Thread(
                    target=run_worker,
                    args=((listen[0], port), j, bx, by),
                    daemon=True,
                )
                t.start()
                threads.append(t)
            z, report = run_coordinator(srv, len(blocks), x.shape[1], config)
            for t in threads:
                t.join(timeout=config.timeout)
        finally:
            srv.close()
        return z, report, assignments
    raise ValueError(f"unknown topology {topology!r}")
