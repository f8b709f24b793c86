"""Scene tokenization: modified set-abstraction layers, language embedding,
proprioceptive feature, and positional/segment encodings.

The "modified" set abstraction replaces farthest-point sampling with even
voxel-grid centers, so small structures are never missed and the token count
tracks occupied voxels. Two stacked layers capture local structure at two
resolutions; coarse features are broadcast back to the fine centers they
contain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from slap.config import EncoderConfig, SetAbstractionConfig
from slap.dataio import Vocabulary
from slap.errors import EmptyCloud
from slap.geometry import PointCloud, voxel_groups
from slap.kernels import gather_neighbors
from slap.scenegen import ProprioState

SEGMENT_SPATIAL, SEGMENT_LANGUAGE, SEGMENT_PROPRIO = 0, 1, 2


@dataclass
class TokenSet:
    """Per-scene token inputs before positional encoding."""

    points: np.ndarray  # (P, 3) token coordinates (the 5 mm set)
    features: torch.Tensor  # (P, D)
    language_tokens: torch.Tensor  # (L, D)
    proprio_feature: torch.Tensor  # (D,)

    def __post_init__(self):
        if self.points.shape[0] != self.features.shape[0]:
            raise ValueError("points and features must have equal length")


def _mlp(widths, dtype):
    layers = []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        layers += [nn.Linear(w_in, w_out, dtype=dtype), nn.ReLU()]
    return nn.Sequential(*layers)


class SetAbstraction(nn.Module):
    """Ball-query grouping around voxel-grid centers, shared MLP, max pool."""

    def __init__(self, in_features: int, cfg: SetAbstractionConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.in_features = in_features
        self.mlp = _mlp((3 + in_features,) + cfg.mlp_widths, dtype)
        self.out_features = cfg.mlp_widths[-1]
        self.dtype = dtype

    def forward(self, points: np.ndarray, features: torch.Tensor, centers: np.ndarray,
                rng=None):
        """-> (n_centers, out_features); ``features`` is (n_points, in_features)."""
        if points.shape[0] == 0:
            raise EmptyCloud("set abstraction received an empty cloud")
        if rng is not None:
            # Random neighbor subsampling on the cheap: shuffle the input once,
            # then capping the ball query at max_neighbors picks a uniform
            # subset. Max pooling is order-invariant, so nothing else changes.
            perm = rng.permutation(points.shape[0])
            points = points[perm]
            features = features[torch.from_numpy(perm)]
        idx, mask = gather_neighbors(points, centers, self.cfg.ball_radius,
                                     self.cfg.max_neighbors, None)
        idx_t = torch.from_numpy(idx)
        mask_t = torch.from_numpy(mask)
        rel = torch.from_numpy(points).to(self.dtype)[idx_t] - \
            torch.from_numpy(centers).to(self.dtype)[:, None, :]
        # Normalize grouped offsets by the query radius so geometry enters the
        # MLP at unit scale regardless of the layer's physical extent.
        grouped = torch.cat([rel / self.cfg.ball_radius, features[idx_t]], dim=-1)
        h = self.mlp(grouped)
        h = torch.where(mask_t[:, :, None], h, torch.tensor(-torch.inf, dtype=h.dtype))
        pooled = h.max(dim=1).values
        # Centers with no neighbor inside the radius get the zero feature
        # (cannot happen when centers come from the input's own voxel grid).
        empty = ~mask_t.any(dim=1)
        if bool(empty.any()):
            pooled = torch.where(empty[:, None], torch.zeros_like(pooled), pooled)
        return pooled


def sine_cosine_bands(coords: np.ndarray, n_bands: int, base_period: float,
                      ratio: float, dtype=torch.float32) -> torch.Tensor:
    """Multi-frequency sin/cos features per axis: (N, axes * bands * 2)."""
    coords_t = torch.from_numpy(np.asarray(coords, dtype=np.float64)).to(dtype)
    if coords_t.ndim == 1:
        coords_t = coords_t[:, None]
    freqs = (2.0 * np.pi / base_period) * ratio ** np.arange(n_bands)
    freqs_t = torch.from_numpy(freqs).to(dtype)
    phase = coords_t[:, :, None] * freqs_t[None, None, :]
    enc = torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)
    return enc.reshape(coords_t.shape[0], -1)


class SceneEncoder(nn.Module):
    """Cloud + command + proprio -> positional-encoded token sequence."""

    def __init__(self, cfg: EncoderConfig, vocab: Vocabulary, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.dtype = dtype
        d = cfg.feature_dim
        self.sa_fine = SetAbstraction(3, cfg.fine, dtype)
        self.sa_coarse = SetAbstraction(self.sa_fine.out_features, cfg.coarse, dtype)
        self.token_proj = nn.Linear(self.sa_fine.out_features + self.sa_coarse.out_features,
                                    d, dtype=dtype)
        self.word_embedding = nn.Embedding(vocab.size, d, dtype=dtype)
        self.proprio_mlp = nn.Sequential(
            nn.Linear(3, cfg.proprio_hidden, dtype=dtype), nn.ReLU(),
            nn.Linear(cfg.proprio_hidden, d, dtype=dtype),
        )
        self.spatial_pe_proj = nn.Linear(3 * cfg.pe_bands * 2, d, dtype=dtype)
        self.segment_embedding = nn.Embedding(3, d, dtype=dtype)

    def two_scale_encode(self, cloud: PointCloud, rng=None) -> TokenSet:
        """Spatial tokens only; language/proprio slots are filled by encode()."""
        if len(cloud) == 0:
            raise EmptyCloud("cannot encode an empty cloud")
        colors = torch.from_numpy(cloud.colors).to(self.dtype)
        fine_centers, fine_keys = _grid_centers(cloud.positions, self.cfg.fine.grid_resolution)
        f_fine = self.sa_fine(cloud.positions, colors, fine_centers, rng)

        coarse_centers, coarse_keys = _grid_centers(fine_centers, self.cfg.coarse.grid_resolution)
        f_coarse = self.sa_coarse(fine_centers, f_fine, coarse_centers, rng)

        # Broadcast each coarse feature to the fine centers its voxel contains.
        parent = _containment_map(fine_centers, coarse_keys, self.cfg.coarse.grid_resolution)
        feats = self.token_proj(torch.cat([f_fine, f_coarse[torch.from_numpy(parent)]], dim=-1))
        d = self.cfg.feature_dim
        return TokenSet(fine_centers, feats,
                        torch.zeros((0, d), dtype=self.dtype),
                        torch.zeros(d, dtype=self.dtype))

    def embed_language(self, command: str) -> torch.Tensor:
        """One embedding per word; unknown words map to the reserved slot."""
        ids = self.vocab.encode(command)
        if not ids:
            raise ValueError("command must contain at least one word")
        if len(ids) > 32:
            raise ValueError(f"command too long ({len(ids)} > 32 words)")
        return self.word_embedding(torch.tensor(ids, dtype=torch.long))

    def encode(self, cloud: PointCloud, command: str, proprio: ProprioState, rng=None) -> TokenSet:
        tokens = self.two_scale_encode(cloud, rng)
        lang = self.embed_language(command)
        prop = self.proprio_mlp(torch.from_numpy(proprio.as_features()).to(self.dtype))
        return TokenSet(tokens.points, tokens.features, lang, prop)

    def positional_encode(self, tokens: TokenSet):
        """-> (sequence (T, D), segments (T,)); T = |P| + words + 1.

        Spatial tokens get projected sin/cos encodings of (x, y, z); language
        tokens get index encodings; each segment adds its own learned
        embedding, and the proprio feature rides along as one extra token.
        """
        cfg = self.cfg
        spatial_pe = self.spatial_pe_proj(sine_cosine_bands(
            tokens.points, cfg.pe_bands, cfg.pe_base_period, cfg.pe_band_ratio, self.dtype))
        spatial = tokens.features + spatial_pe

        n_lang = tokens.language_tokens.shape[0]
        lang = tokens.language_tokens
        if n_lang:
            lang = lang + _index_pe(n_lang, cfg.feature_dim, self.dtype)

        segments = np.concatenate([
            np.full(spatial.shape[0], SEGMENT_SPATIAL),
            np.full(n_lang, SEGMENT_LANGUAGE),
            [SEGMENT_PROPRIO],
        ]).astype(np.int64)
        seq = torch.cat([spatial, lang, tokens.proprio_feature[None, :]], dim=0)
        seq = seq + self.segment_embedding(torch.from_numpy(segments))
        return seq, segments


def _grid_centers(positions: np.ndarray, resolution: float):
    order, starts, keys = voxel_groups(positions, resolution)
    counts = np.diff(starts).astype(np.float64)[:, None]
    centers = np.add.reduceat(positions[order], starts[:-1], axis=0) / counts
    return centers, keys


def _index_pe(n: int, d: int, dtype) -> torch.Tensor:
    """Classic sinusoidal sequence-position encoding, shape (n, d)."""
    pos = torch.arange(n, dtype=dtype)[:, None]
    i = torch.arange(0, d, 2, dtype=dtype)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / d)
    pe = torch.zeros((n, d), dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


def _pack_keys(keys: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    rel = keys - lo
    return (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]


def _containment_map(fine_centers: np.ndarray, coarse_keys: np.ndarray,
                     resolution: float) -> np.ndarray:
    """Index of each fine center's parent coarse voxel (always occupied)."""
    fine_keys = np.floor(fine_centers / resolution).astype(np.int64)
    lo = coarse_keys.min(axis=0)
    span = coarse_keys.max(axis=0) - lo + 1
    # coarse_keys are lexicographically sorted (voxel_groups), so the packed
    # values are sorted too and searchsorted recovers the group index.
    ck = _pack_keys(coarse_keys, lo, span)
    fk = _pack_keys(fine_keys, lo, span)
    pos = np.searchsorted(ck, fk)
    ok = (pos < ck.shape[0]) & np.all((fine_keys >= lo) & (fine_keys < lo + span), axis=1)
    if not np.all(ok) or np.any(ck[np.minimum(pos, ck.shape[0] - 1)] != fk):
        raise AssertionError("fine center fell outside every occupied coarse voxel")
    return pos.astype(np.int64)
