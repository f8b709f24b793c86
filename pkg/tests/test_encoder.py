import numpy as np
import pytest
import torch

from slap.config import EncoderConfig, SetAbstractionConfig
from slap.dataio import Vocabulary
from slap.encoder import (
    SEGMENT_LANGUAGE,
    SEGMENT_PROPRIO,
    SEGMENT_SPATIAL,
    SceneEncoder,
    SetAbstraction,
    sine_cosine_bands,
)
from slap.errors import EmptyCloud
from slap.geometry import PointCloud
from slap.scenegen import ProprioState
from test_geometry import brute_force_voxel_count


def small_cfg(**kw):
    defaults = dict(
        feature_dim=32,
        fine=SetAbstractionConfig(0.02, 0.05, max_neighbors=64, mlp_widths=(16, 24)),
        coarse=SetAbstractionConfig(0.08, 0.2, max_neighbors=64, mlp_widths=(16, 24)),
        pe_bands=6, proprio_hidden=8,
    )
    defaults.update(kw)
    return EncoderConfig(**defaults)


def make_encoder(seed=0, **kw):
    torch.manual_seed(seed)
    vocab = Vocabulary(["bottle", "pick", "the", "up"])
    return SceneEncoder(small_cfg(**kw), vocab, dtype=torch.float64)


def random_cloud(rng, n, scale=0.15):
    return PointCloud(rng.uniform(0, scale, (n, 3)), rng.uniform(0, 1, (n, 3)))


class TestSetAbstraction:
    def test_single_point_degenerate(self):
        torch.manual_seed(0)
        sa = SetAbstraction(3, SetAbstractionConfig(0.01, 0.02, max_neighbors=4,
                                                    mlp_widths=(8, 8)), torch.float64)
        pts = np.array([[0.05, 0.05, 0.05]])
        feats = torch.ones((1, 3), dtype=torch.float64)
        out = sa(pts, feats, pts.copy())
        assert out.shape == (1, 8)
        # One neighbor at zero offset: max pool over a single row.
        expected = sa.mlp(torch.cat([torch.zeros((1, 1, 3), dtype=torch.float64),
                                     feats[None]], dim=-1))[0, 0]
        np.testing.assert_allclose(out[0].detach(), expected.detach(), atol=1e-12)

    def test_empty_cloud_raises(self):
        sa = SetAbstraction(3, SetAbstractionConfig(0.01, 0.02), torch.float64)
        with pytest.raises(EmptyCloud):
            sa(np.zeros((0, 3)), torch.zeros((0, 3), dtype=torch.float64), np.zeros((0, 3)))

    def test_zero_neighbor_center_gets_zero_feature(self, rng):
        torch.manual_seed(0)
        sa = SetAbstraction(3, SetAbstractionConfig(0.01, 0.02, max_neighbors=4,
                                                    mlp_widths=(8, 8)), torch.float64)
        pts = np.zeros((3, 3))
        feats = torch.ones((3, 3), dtype=torch.float64)
        centers = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        out = sa(pts, feats, centers)
        assert torch.all(out[1] == 0)
        assert torch.any(out[0] != 0)


class TestTwoScaleEncode:
    def test_token_count_matches_voxel_oracle(self, rng):
        enc = make_encoder()
        cloud = random_cloud(rng, 500)
        tokens = enc.two_scale_encode(cloud)
        assert tokens.points.shape[0] == brute_force_voxel_count(cloud.positions, 0.02)
        assert tokens.features.shape == (tokens.points.shape[0], 32)

    def test_permutation_invariance_no_subsampling(self, rng):
        enc = make_encoder()
        cloud = random_cloud(rng, 200)
        perm = rng.permutation(len(cloud))
        t1 = enc.two_scale_encode(cloud, rng=None)
        t2 = enc.two_scale_encode(cloud.select(perm), rng=None)
        np.testing.assert_allclose(t1.points, t2.points, atol=0)
        np.testing.assert_allclose(t1.features.detach(), t2.features.detach(), atol=1e-9)

    def test_single_coarse_voxel_broadcasts_uniformly(self, rng):
        enc = make_encoder()
        cloud = random_cloud(rng, 80, scale=0.05)  # inside one 8 cm voxel
        tokens = enc.two_scale_encode(cloud)
        f_fine = enc.sa_fine(cloud.positions,
                             torch.from_numpy(cloud.colors), tokens.points)
        coarse_part = tokens.features - enc.token_proj(
            torch.cat([f_fine, torch.zeros((len(f_fine),
                                            enc.sa_coarse.out_features),
                                           dtype=torch.float64)], dim=-1))
        # The coarse contribution is identical for every token.
        spread = (coarse_part - coarse_part[0]).abs().max().item()
        assert spread < 1e-9

    def test_locality_under_disjoint_translation(self, rng):
        enc = make_encoder()
        cloud = random_cloud(rng, 120, scale=0.1)
        far = PointCloud(cloud.positions + np.array([5.0, 0, 0]), cloud.colors)
        both = PointCloud(np.concatenate([cloud.positions, far.positions]),
                          np.concatenate([cloud.colors, far.colors]))
        t_single = enc.two_scale_encode(cloud, rng=None)
        t_both = enc.two_scale_encode(both, rng=None)
        n = t_single.points.shape[0]
        np.testing.assert_allclose(t_both.points[:n], t_single.points, atol=0)
        np.testing.assert_allclose(t_both.features[:n].detach(),
                                   t_single.features.detach(), atol=1e-9)

    def test_empty_raises(self):
        enc = make_encoder()
        with pytest.raises(EmptyCloud):
            enc.two_scale_encode(PointCloud.empty())


class TestLanguage:
    def test_word_count_contract(self):
        enc = make_encoder()
        out = enc.embed_language("pick up the bottle")
        assert out.shape == (4, 32)

    def test_deterministic(self):
        enc = make_encoder()
        a = enc.embed_language("pick up the bottle")
        b = enc.embed_language("pick up the bottle")
        np.testing.assert_array_equal(a.detach(), b.detach())

    def test_unknown_word_uses_reserved_slot(self):
        enc = make_encoder()
        out = enc.embed_language("zorp")
        np.testing.assert_allclose(out[0].detach(),
                                   enc.word_embedding.weight[0].detach(), atol=0)

    def test_rejects_empty_and_too_long(self):
        enc = make_encoder()
        with pytest.raises(ValueError):
            enc.embed_language("...")
        with pytest.raises(ValueError):
            enc.embed_language("word " * 33)


class TestPositionalEncoding:
    def test_sequence_layout(self, rng, demo_bottle):
        enc = make_encoder()
        tokens = enc.encode(demo_bottle.cloud, "pick up the bottle",
                            ProprioState(0, 0.08, 0), rng)
        seq, segments = enc.positional_encode(tokens)
        n_spatial = tokens.points.shape[0]
        assert seq.shape[0] == n_spatial + 4 + 1
        assert (segments == SEGMENT_SPATIAL).sum() == n_spatial
        assert (segments == SEGMENT_LANGUAGE).sum() == 4
        assert (segments == SEGMENT_PROPRIO).sum() == 1
        assert torch.isfinite(seq).all()

    def test_identical_coordinates_identical_terms(self):
        enc = make_encoder()
        coords = np.array([[0.3, 0.2, 0.1], [0.3, 0.2, 0.1]])
        pe = enc.spatial_pe_proj(sine_cosine_bands(coords, 6, 8.0, 2.5, torch.float64))
        np.testing.assert_array_equal(pe[0].detach(), pe[1].detach())

    def test_segment_embeddings_distinct(self):
        enc = make_encoder()
        emb = enc.segment_embedding.weight.detach()
        assert not torch.allclose(emb[SEGMENT_SPATIAL], emb[SEGMENT_LANGUAGE])
        assert not torch.allclose(emb[SEGMENT_LANGUAGE], emb[SEGMENT_PROPRIO])

    def test_no_full_band_aliasing_at_workspace_scale(self):
        # Shifting by the lowest band's period must still change the encoding:
        # the non-integer band ratio guarantees higher bands move off-phase.
        base_period, ratio, bands = 8.0, 2.5, 6
        xs = np.linspace(-2.0, 2.0, 401)
        enc_x = sine_cosine_bands(xs, bands, base_period, ratio, torch.float64)
        enc_shifted = sine_cosine_bands(xs + base_period, bands, base_period, ratio,
                                        torch.float64)
        diff = (enc_x - enc_shifted).abs().max(dim=1).values
        assert float(diff.min()) > 0.1

    def test_injective_over_workspace_sweep(self):
        xs = np.linspace(-2.0, 2.0, 2001)
        enc = sine_cosine_bands(xs, 6, 8.0, 2.5, torch.float64).numpy()
        d = np.linalg.norm(enc[:, None, :] - enc[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        # 2 mm-separated samples stay distinguishable across the band set.
        assert d.min() > 1e-4


class TestFullEncode:
    def test_finite_features_for_finite_input(self, rng, demo_bottle):
        enc = make_encoder()
        tokens = enc.encode(demo_bottle.cloud, "pick up the bottle",
                            ProprioState(0, 0.08, 0), rng)
        assert torch.isfinite(tokens.features).all()
        assert torch.isfinite(tokens.language_tokens).all()
        assert torch.isfinite(tokens.proprio_feature).all()
