"""Dual-input joint-attention velocity model.

The noisy image ``z``, the input image, the reference crop and the
instruction are turned into one token sequence ``[Z; CI; CR; CT]``.  Every
token carries an integer triple ``(idx, h, w)``; the triple is embedded by
three additive lookup tables.  All tokens attend to all tokens.  Only the
``Z`` tokens are read out, through a zero-initialised head, as a velocity
image of the same size as ``z``.

Parameters live in a flat ``dict[str, torch.Tensor]`` so that policy
snapshots, reference policies and checkpoints are plain dictionaries.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import NumericalError, ShapeError, SpecError, VocabularyError

SEG_Z, SEG_CI, SEG_CR, SEG_CT = 0, 1, 2, 3
SEGMENT_NAMES = ("Z", "CI", "CR", "CT")
PE_MODES = ("offset", "clone")
ADAPTER_RANKS = (0, 2, 4, 8)
ADAPTED = ("q", "k", "v", "o")

DTYPE = torch.float64

# Initial gains that let attention tell grid positions apart from the first
# step: the (h, w) tables start large relative to patch content, and each
# block's key projection starts equal to its (scaled) query projection, so a
# token's strongest match is the token with the same (h, w) in another segment.
POS_INIT_GAIN = 16.0
QK_INIT_GAIN = 3.0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    token_patch: int = 4
    channels: int = 3
    model_dim: int = 64
    heads: int = 4
    blocks: int = 4
    vocab: int = 64
    max_instr: int = 64
    mlp_ratio: int = 4
    time_freqs: int = 8
    pe_mode: str = "offset"
    adapter_rank: int = 0

    def __post_init__(self):
        if self.image_size % self.token_patch:
            raise SpecError(f"image_size {self.image_size} not divisible by token_patch {self.token_patch}")
        if self.model_dim % self.heads:
            raise SpecError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.pe_mode not in PE_MODES:
            raise SpecError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if self.adapter_rank not in ADAPTER_RANKS:
            raise SpecError(f"adapter_rank must be one of {ADAPTER_RANKS}, got {self.adapter_rank}")

    @property
    def grid(self) -> int:
        return self.image_size // self.token_patch

    @property
    def patch_dim(self) -> int:
        return self.token_patch * self.token_patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- parameters ------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, torch.Tensor]:
    """Seeded uniform initialisation; the output head starts at exactly zero.

    See ``POS_INIT_GAIN`` and ``QK_INIT_GAIN`` for the two deliberate departures
    from plain ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """
    rng = np.random.default_rng(seed)
    d, pd = cfg.model_dim, cfg.patch_dim
    hidden = cfg.mlp_ratio * d
    p: dict[str, torch.Tensor] = {
        "patch_in.weight": _uniform(rng, (d, pd), pd),
        "patch_in.bias": _uniform(rng, (d,), pd),
        "tok_emb": _uniform(rng, (cfg.vocab, d), d),
        "pos_idx": _uniform(rng, (4, d), d),
        "pos_h": _uniform(rng, (cfg.grid, d), d),
        "pos_w": _uniform(rng, (max(cfg.grid, cfg.max_instr), d), d),
        "time.weight": _uniform(rng, (d, 2 * cfg.time_freqs), 2 * cfg.time_freqs),
        "time.bias": torch.zeros(d, dtype=DTYPE),
    }
    for b in range(cfg.blocks):
        pre = f"blocks.{b}."
        p[pre + "ln1.weight"] = torch.ones(d, dtype=DTYPE)
        p[pre + "ln1.bias"] = torch.zeros(d, dtype=DTYPE)
        for name in ADAPTED:
            p[pre + f"attn.{name}.weight"] = _uniform(rng, (d, d), d)
            p[pre + f"attn.{name}.bias"] = torch.zeros(d, dtype=DTYPE)
        p[pre + "ln2.weight"] = torch.ones(d, dtype=DTYPE)
        p[pre + "ln2.bias"] = torch.zeros(d, dtype=DTYPE)
        p[pre + "mlp.fc1.weight"] = _uniform(rng, (hidden, d), d)
        p[pre + "mlp.fc1.bias"] = torch.zeros(hidden, dtype=DTYPE)
        p[pre + "mlp.fc2.weight"] = _uniform(rng, (d, hidden), hidden)
        p[pre + "mlp.fc2.bias"] = torch.zeros(d, dtype=DTYPE)
    p["pos_h"] = p["pos_h"] * POS_INIT_GAIN
    p["pos_w"] = p["pos_w"] * POS_INIT_GAIN
    for b in range(cfg.blocks):
        q = p[f"blocks.{b}.attn.q.weight"] * QK_INIT_GAIN
        p[f"blocks.{b}.attn.q.weight"] = q
        p[f"blocks.{b}.attn.k.weight"] = q.clone()
    p["final_ln.weight"] = torch.ones(d, dtype=DTYPE)
    p["final_ln.bias"] = torch.zeros(d, dtype=DTYPE)
    p["head.weight"] = torch.zeros(pd, d, dtype=DTYPE)
    p["head.bias"] = torch.zeros(pd, dtype=DTYPE)
    if cfg.adapter_rank:
        p.update(init_adapter(cfg, seed + 1))
    return {k: v.to(DTYPE) for k, v in p.items()}


def init_adapter(cfg: ModelConfig, seed: int) -> dict[str, torch.Tensor]:
    """Low-rank factor pairs ``(A, B)`` per attention projection, with ``A = 0``."""
    rng = np.random.default_rng(seed)
    r, d = cfg.adapter_rank, cfg.model_dim
    out = {}
    for b in range(cfg.blocks):
        for name in ADAPTED:
            key = f"blocks.{b}.attn.{name}"
            out[key + ".lora_A"] = torch.zeros(d, r, dtype=DTYPE)
            out[key + ".lora_B"] = _uniform(rng, (r, d), d)
    return out


def is_adapter(name: str) -> bool:
    return name.endswith(".lora_A") or name.endswith(".lora_B")


def apply_adapter(params: dict, deltas: dict | None, rank: int) -> dict:
    """Fold low-rank deltas into their base matrices: ``W + A @ B``."""
    base = {k: v for k, v in params.items() if not is_adapter(k)}
    if rank == 0:
        if deltas:
            raise ShapeError("rank 0 adapter given non-empty deltas")
        return base
    deltas = deltas if deltas is not None else {k: v for k, v in params.items() if is_adapter(k)}
    out = dict(base)
    for key in sorted(k[: -len(".lora_A")] for k in deltas if k.endswith(".lora_A")):
        a, b = deltas[key + ".lora_A"], deltas[key + ".lora_B"]
        w = base[key + ".weight"]
        if a.shape != (w.shape[0], rank) or b.shape != (rank, w.shape[1]):
            raise ShapeError(f"{key}: adapter factors {tuple(a.shape)}, {tuple(b.shape)} do not match rank {rank}")
        out[key + ".weight"] = w + a @ b
    return out


def count_params(params: dict) -> int:
    return sum(v.numel() for v in params.values())


# -- tokens -------------------------------------------------------------------------


@dataclass
class TokenBatch:
    """Padded token sequences.

    ``tokens`` is ``(B, N, d)`` content embeddings (positions not yet added),
    ``segment`` and ``valid`` are ``(B, N)``, ``pos_ids`` is ``(B, N, 3)``.
    Padding sits after the last valid token of each row.
    """

    tokens: torch.Tensor
    segment: torch.Tensor
    pos_ids: torch.Tensor
    valid: torch.Tensor
    grids: list  # per row: {"Z": (gh, gw), "CI": ..., "CR": ..., "CT": n}

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    def row(self, i: int) -> "TokenBatch":
        n = int(self.valid[i].sum())
        return TokenBatch(
            self.tokens[i : i + 1, :n], self.segment[i : i + 1, :n], self.pos_ids[i : i + 1, :n],
            self.valid[i : i + 1, :n], [self.grids[i]],
        )


def patchify(img: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, H, W, C)`` -> ``(B, H/p * W/p, p*p*C)`` in row-major token order."""
    b, h, w, c = img.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by token patch {p}")
    x = img.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: torch.Tensor, p: int, h: int, w: int, c: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _grid_ids(idx: int, gh: int, gw: int) -> torch.Tensor:
    hh, ww = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
    return torch.stack([torch.full((gh * gw,), idx), hh.reshape(-1), ww.reshape(-1)], dim=1)


def segment_ids(segment: str, grid, pe_mode: str = "offset") -> torch.Tensor:
    """Positional triples for one segment.

    ``offset``: Z -> (0,h,w), CI -> (1,h,w), CR -> (2,h,w), CT -> (3,0,j).
    ``clone``: CI and CR reuse leading index 0.
    """
    if segment == "CT":
        n = int(grid)
        return torch.stack([torch.full((n,), 3), torch.zeros(n, dtype=torch.long), torch.arange(n)], dim=1).long()
    lead = {"Z": 0, "CI": 1, "CR": 2}[segment]
    if pe_mode == "clone":
        lead = 0
    elif pe_mode != "offset":
        raise SpecError(f"unknown pe_mode {pe_mode!r}")
    return _grid_ids(lead, *grid).long()


def assign_pos_ids(batch: TokenBatch, pe_mode: str) -> TokenBatch:
    """Recompute ``pos_ids`` from the segment layout of every row."""
    pos = torch.zeros_like(batch.pos_ids)
    for i, grids in enumerate(batch.grids):
        offset = 0
        for seg_code, name in enumerate(SEGMENT_NAMES):
            ids = segment_ids(name, grids[name], pe_mode)
            n = ids.shape[0]
            if n and not torch.all(batch.segment[i, offset : offset + n] == seg_code):
                raise ShapeError(f"row {i}: segment {name} is not a contiguous run at offset {offset}")
            pos[i, offset : offset + n] = ids
            offset += n
    return TokenBatch(batch.tokens, batch.segment, pos, batch.valid, batch.grids)


def _as_tensor(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img) if not isinstance(img, torch.Tensor) else img, dtype=DTYPE)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t


def tokenize(params: dict, cfg: ModelConfig, z, input_img, refs, instrs) -> TokenBatch:
    """Embed image patches and instruction tokens into one padded sequence per row.

    ``z`` and ``input_img`` are ``(B, H, W, C)`` (or a single ``(H, W, C)``);
    ``refs`` is a list of ``(h, w, C)`` arrays and ``instrs`` a list of
    token-id lists (single items are accepted for ``B = 1``).
    """
    z, inp = _as_tensor(z), _as_tensor(input_img)
    if z.shape != inp.shape:
        raise ShapeError(f"z {tuple(z.shape)} and input {tuple(inp.shape)} differ")
    bsz, h, w, c = z.shape
    if c != cfg.channels:
        raise ShapeError(f"expected {cfg.channels} channels, got {c}")
    if not isinstance(refs, (list, tuple)):
        refs = [refs] * bsz if bsz == 1 else list(refs)
    if instrs and not isinstance(instrs[0], (list, tuple)):
        instrs = [instrs]
    if not instrs:
        instrs = [[] for _ in range(bsz)]
    if len(refs) != bsz or len(instrs) != bsz:
        raise ShapeError("refs/instrs do not match batch size")
    p = cfg.token_patch
    wp, bp = params["patch_in.weight"], params["patch_in.bias"]
    z_tok = patchify(z, p) @ wp.T + bp
    i_tok = patchify(inp, p) @ wp.T + bp
    gz = (h // p, w // p)
    rows, segs, grids = [], [], []
    for b in range(bsz):
        ref = _as_tensor(refs[b])
        rh, rw = ref.shape[1:3]
        if rh > h or rw > w:
            raise ShapeError(f"reference {rh}x{rw} larger than input {h}x{w}")
        r_tok = patchify(ref, p)[0] @ wp.T + bp
        ids = list(instrs[b])
        if len(ids) > cfg.max_instr:
            raise ShapeError(f"instruction of {len(ids)} tokens exceeds {cfg.max_instr}")
        if any(not 0 <= t < cfg.vocab for t in ids):
            raise VocabularyError(f"instruction token out of vocabulary range [0, {cfg.vocab})")
        t_tok = params["tok_emb"][torch.as_tensor(ids, dtype=torch.long)] if ids else wp.new_zeros((0, wp.shape[0]))
        rows.append(torch.cat([z_tok[b], i_tok[b], r_tok, t_tok], dim=0))
        segs.append([SEG_Z] * gz[0] * gz[1] + [SEG_CI] * gz[0] * gz[1] + [SEG_CR] * r_tok.shape[0] + [SEG_CT] * len(ids))
        grids.append({"Z": gz, "CI": gz, "CR": (rh // p, rw // p), "CT": len(ids)})
    n_max = max(r.shape[0] for r in rows)
    d = wp.shape[0]
    segment = torch.full((bsz, n_max), -1, dtype=torch.long)
    valid = torch.zeros((bsz, n_max), dtype=torch.bool)
    for b, r in enumerate(rows):
        n = r.shape[0]
        segment[b, :n] = torch.as_tensor(segs[b])
        valid[b, :n] = True
    tokens = torch.stack([torch.cat([r, r.new_zeros((n_max - r.shape[0], d))], dim=0) for r in rows])
    batch = TokenBatch(tokens, segment, torch.zeros((bsz, n_max, 3), dtype=torch.long), valid, grids)
    return assign_pos_ids(batch, cfg.pe_mode)


# -- network ---------------------------------------------------------------------------


def time_features(t: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """Sinusoidal features of ``t`` in [0, 1], shape ``(B, 2 * n_freqs)``."""
    freqs = torch.pow(2.0, torch.arange(n_freqs, dtype=DTYPE)) * math.pi
    ang = t.reshape(-1, 1).to(DTYPE) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def _layer_norm(x, weight, bias, eps=1e-5):
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def attention_weights(q: torch.Tensor, k: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d_k))`` over the key axis; invalid keys get zero weight."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_valid is not None:
        logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
    return torch.softmax(logits, dim=-1)


def joint_attention(x: torch.Tensor, params: dict, prefix: str, heads: int, key_valid=None, return_weights=False):
    """Multi-head self-attention over the whole concatenated sequence."""
    bsz, n, d = x.shape
    hd = d // heads

    def proj(name):
        return x @ params[f"{prefix}.{name}.weight"].T + params[f"{prefix}.{name}.bias"]

    q, k, v = (proj(nm).reshape(bsz, n, heads, hd).transpose(1, 2) for nm in ("q", "k", "v"))
    att = attention_weights(q, k, key_valid)
    out = (att @ v).transpose(1, 2).reshape(bsz, n, d)
    out = out @ params[f"{prefix}.o.weight"].T + params[f"{prefix}.o.bias"]
    return (out, att) if return_weights else out


def embed_positions(params: dict, pos_ids: torch.Tensor) -> torch.Tensor:
    return params["pos_idx"][pos_ids[..., 0]] + params["pos_h"][pos_ids[..., 1]] + params["pos_w"][pos_ids[..., 2]]


def forward_tokens(params: dict, cfg: ModelConfig, batch: TokenBatch, t) -> torch.Tensor:
    """Run the transformer over a token batch and return velocity images ``(B, H, W, C)``."""
    if cfg.adapter_rank:
        params = apply_adapter(params, None, cfg.adapter_rank)
    bsz = batch.batch_size
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    if t.numel() == 1 and bsz > 1:
        t = t.expand(bsz)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("time must lie in [0, 1]")
    temb = time_features(t, cfg.time_freqs) @ params["time.weight"].T + params["time.bias"]
    is_z = (batch.segment == SEG_Z).to(DTYPE).unsqueeze(-1)
    x = batch.tokens + embed_positions(params, batch.pos_ids) + is_z * temb[:, None, :]
    key_valid = None if bool(batch.valid.all()) else batch.valid
    for b in range(cfg.blocks):
        pre = f"blocks.{b}."
        h = _layer_norm(x, params[pre + "ln1.weight"], params[pre + "ln1.bias"])
        x = x + joint_attention(h, params, pre + "attn", cfg.heads, key_valid)
        h = _layer_norm(x, params[pre + "ln2.weight"], params[pre + "ln2.bias"])
        h = torch.nn.functional.gelu(h @ params[pre + "mlp.fc1.weight"].T + params[pre + "mlp.fc1.bias"])
        x = x + h @ params[pre + "mlp.fc2.weight"].T + params[pre + "mlp.fc2.bias"]
    gh, gw = batch.grids[0]["Z"]
    nz = gh * gw
    z_out = torch.stack([x[i][batch.segment[i] == SEG_Z] for i in range(bsz)]) if _z_scattered(batch, nz) else x[:, :nz]
    z_out = _layer_norm(z_out, params["final_ln.weight"], params["final_ln.bias"])
    out = z_out @ params["head.weight"].T + params["head.bias"]
    p = cfg.token_patch
    vel = unpatchify(out, p, gh * p, gw * p, cfg.channels)
    if not torch.isfinite(vel).all():
        raise NumericalError("non-finite velocity")
    return vel


def _z_scattered(batch: TokenBatch, nz: int) -> bool:
    return not bool(torch.all(batch.segment[:, :nz] == SEG_Z))


def forward(params: dict, cfg: ModelConfig, z, input_img, refs, instrs, t) -> torch.Tensor:
    """Velocity prediction for noisy images ``z`` at time ``t``."""
    return forward_tokens(params, cfg, tokenize(params, cfg, z, input_img, refs, instrs), t)
