"""Transaction encoder producing the shared fused representation.

A declaration enters as five standardized numeric features plus two
categorical ids (HS6 code, origin country). The transaction embedding p
and the category embedding q interact through their outer product; a small
convolution over that k x k map is pooled into an interaction vector g,
and the fused representation h = ReLU(affine([p, g])) feeds every
downstream consumer: the contrastive loss, prototype clustering, memory
attention, and the fraud head.

The width of h is fixed by configuration, not by the data, so prototype
sets built by different countries are dimension-compatible by
construction. Categories unseen at training time map to a reserved
learned "unknown" row of each embedding table.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .container import read_envelope, write_envelope
from .declarations import CountryDataset, ImportDeclaration
from .errors import DataError, FormatError
from .numerics import Tensor

FEATURE_NAMES = (
    "log_quantity",
    "log_gross_weight",
    "log_cif_value",
    "log1p_total_taxes",
    "price_per_kg",
)


@dataclass(frozen=True)
class EncoderConfig:
    k: int = 16  # embedding width of p and q
    d: int = 32  # fused representation width
    n_kernels: int = 8
    use_interaction: bool = True  # outer-product path; False = plain [p, q] concat


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray  # (5,)
    std: np.ndarray  # (5,), floored at 1e-6


def record_features(rec: ImportDeclaration) -> np.ndarray:
    return np.array(
        [
            math.log(rec.quantity),
            math.log(rec.gross_weight),
            math.log(rec.cif_value),
            math.log1p(rec.total_taxes),
            rec.cif_value / rec.gross_weight,
        ]
    )


def standardize_stats(train: CountryDataset) -> FeatureStats:
    """Per-feature mean/stdev over the train split; stdev floored at 1e-6."""
    if not train.records:
        raise DataError("cannot compute feature statistics on an empty split")
    feats = np.stack([record_features(r) for r in train.records])
    return FeatureStats(feats.mean(axis=0), np.maximum(feats.std(axis=0), 1e-6))


@dataclass
class TransactionEmbedding:
    p: np.ndarray
    q: np.ndarray
    g: np.ndarray | None
    h: np.ndarray
    score: float


@dataclass
class EncoderParams:
    """All learnable encoder state plus the frozen featurization context."""

    config: EncoderConfig
    hs6_vocab: dict[str, int]
    country_vocab: dict[str, int]
    stats: FeatureStats
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @staticmethod
    def init(
        rng: np.random.Generator,
        hs6_vocab: dict[str, int],
        country_vocab: dict[str, int],
        stats: FeatureStats,
        config: EncoderConfig = EncoderConfig(),
    ) -> "EncoderParams":
        k, d, c = config.k, config.d, config.n_kernels

        def w(shape, scale):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        # extra row in each table is the learned "unknown" embedding
        tensors = {
            "hs6_table": w((len(hs6_vocab) + 1, k), 0.1),
            "country_table": w((len(country_vocab) + 1, k), 0.1),
            "w_num": w((len(FEATURE_NAMES), k), 1.0 / math.sqrt(len(FEATURE_NAMES))),
            "b_p": zeros((k,)),
        }
        if config.use_interaction:
            tensors["conv_kernels"] = w((c, 3, 3), 1.0 / 3.0)
            tensors["conv_bias"] = zeros((c,))
            tensors["w_pool"] = w((c, k), 1.0 / math.sqrt(c))
            tensors["b_pool"] = zeros((k,))
        tensors["w_fuse"] = w((2 * k, d), 1.0 / math.sqrt(2 * k))
        tensors["b_fuse"] = zeros((d,))
        params = EncoderParams(config, dict(hs6_vocab), dict(country_vocab), stats, tensors)
        params.reinit_head(rng)
        return params

    def reinit_head(self, rng: np.random.Generator) -> None:
        d = self.config.d
        self.tensors["head_w"] = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(d), (d, 1)), requires_grad=True
        )
        self.tensors["head_b"] = Tensor(np.zeros((1,)), requires_grad=True)

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config,
            dict(self.hs6_vocab),
            dict(self.country_vocab),
            FeatureStats(self.stats.mean.copy(), self.stats.std.copy()),
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
        )

    def hs6_index(self, hs6: str) -> int:
        return self.hs6_vocab.get(hs6, len(self.hs6_vocab))

    def country_index(self, code: str) -> int:
        return self.country_vocab.get(code, len(self.country_vocab))


def batch_inputs(params: EncoderParams, records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Standardized features and vocab indices for a record sequence."""
    feats = np.stack([record_features(r) for r in records])
    feats = (feats - params.stats.mean) / params.stats.std
    hs6_idx = np.array([params.hs6_index(r.hs6) for r in records], dtype=np.int64)
    cty_idx = np.array([params.country_index(r.country_code) for r in records], dtype=np.int64)
    return feats, hs6_idx, cty_idx


def embed_batch(
    params: EncoderParams,
    feats: np.ndarray,
    hs6_idx: np.ndarray,
    cty_idx: np.ndarray,
) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
    """Forward pass to (p, q, g, h) tensors for a batch."""
    t = params.tensors
    f = Tensor(feats)
    p = nm.tanh(
        nm.add(
            nm.add(nm.matmul(f, t["w_num"]), nm.gather_rows(t["country_table"], cty_idx)),
            t["b_p"],
        )
    )
    q = nm.gather_rows(t["hs6_table"], hs6_idx)
    if params.config.use_interaction:
        interaction = nm.outer(p, q)  # (N, k, k)
        conv = nm.relu(nm.conv2d(interaction, t["conv_kernels"], t["conv_bias"]))
        pooled = nm.reduce_mean(conv, axis=(2, 3))  # global average per channel
        g = nm.add(nm.matmul(pooled, t["w_pool"]), t["b_pool"])
        z = nm.concat([p, g], axis=1)
    else:
        g = None
        z = nm.concat([p, q], axis=1)
    h = nm.relu(nm.add(nm.matmul(z, t["w_fuse"]), t["b_fuse"]))
    return p, q, g, h


def score_batch(params: EncoderParams, h: Tensor) -> Tensor:
    """Fraud probabilities in (0,1), shape (N, 1)."""
    t = params.tensors
    return nm.sigmoid(nm.add(nm.matmul(h, t["head_w"]), t["head_b"]))


def embed(params: EncoderParams, x: ImportDeclaration) -> TransactionEmbedding:
    """Single-record convenience wrapper; returns plain numpy views."""
    feats, hs6_idx, cty_idx = batch_inputs(params, [x])
    with inference(params):
        p, q, g, h = embed_batch(params, feats, hs6_idx, cty_idx)
        score = score_batch(params, h)
    return TransactionEmbedding(
        p=p.data[0],
        q=q.data[0],
        g=None if g is None else g.data[0],
        h=h.data[0],
        score=float(score.data[0, 0]),
    )


def fraud_score(params: EncoderParams, h) -> float:
    """Score a single fused representation."""
    ht = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64).reshape(1, -1))
    return float(score_batch(params, ht).data[0, 0])


@contextmanager
def inference(params: EncoderParams):
    """Temporarily stop graph construction for pure scoring passes."""
    flags = {k: t.requires_grad for k, t in params.tensors.items()}
    for t in params.tensors.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for k, t in params.tensors.items():
            t.requires_grad = flags[k]


def embed_matrix(params: EncoderParams, records, chunk: int = 1024) -> np.ndarray:
    """Fused representations h for many records, without building a graph."""
    out = []
    with inference(params):
        for lo in range(0, len(records), chunk):
            feats, hi, ci = batch_inputs(params, records[lo : lo + chunk])
            out.append(embed_batch(params, feats, hi, ci)[3].data)
    return np.vstack(out) if out else np.zeros((0, params.config.d))


def score_records(params: EncoderParams, records, chunk: int = 1024) -> np.ndarray:
    """Fraud scores for many records, without building a graph."""
    out = []
    with inference(params):
        for lo in range(0, len(records), chunk):
            feats, hi, ci = batch_inputs(params, records[lo : lo + chunk])
            _, _, _, h = embed_batch(params, feats, hi, ci)
            out.append(score_batch(params, h).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# serialization via the shared container envelope


def _vocab_to_list(vocab: dict[str, int]) -> list[str]:
    return [k for k, _ in sorted(vocab.items(), key=lambda kv: kv[1])]


def encoder_meta(params: EncoderParams) -> dict:
    return {
        "kind": "encoder",
        "config": {
            "k": params.config.k,
            "d": params.config.d,
            "n_kernels": params.config.n_kernels,
            "use_interaction": params.config.use_interaction,
        },
        "hs6_vocab": _vocab_to_list(params.hs6_vocab),
        "country_vocab": _vocab_to_list(params.country_vocab),
        "feature_mean": params.stats.mean.tolist(),
        "feature_std": params.stats.std.tolist(),
    }


def encoder_from_meta(meta: dict, tensors: dict[str, np.ndarray]) -> EncoderParams:
    cfg = EncoderConfig(**meta["config"])
    params = EncoderParams(
        cfg,
        {h: i for i, h in enumerate(meta["hs6_vocab"])},
        {c: i for i, c in enumerate(meta["country_vocab"])},
        FeatureStats(np.asarray(meta["feature_mean"]), np.asarray(meta["feature_std"])),
        {k: Tensor(v, requires_grad=True) for k, v in tensors.items()},
    )
    return params


def save_encoder(params: EncoderParams) -> bytes:
    return write_envelope(encoder_meta(params), {k: t.data for k, t in params.tensors.items()})


def load_encoder(data: bytes) -> EncoderParams:
    meta, tensors = read_envelope(data)
    if meta.get("kind") != "encoder":
        raise FormatError(f"expected an encoder bundle, got kind={meta.get('kind')!r}")
    return encoder_from_meta(meta, tensors)
