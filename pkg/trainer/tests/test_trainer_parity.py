"""Trainer-vs-engine agreement: the torch network must reproduce the numpy
engine's forward pass on identical weights, and the sampler must reproduce
the engine's own preprocessing geometry."""

import numpy as np
import pytest
import torch

from recistseg.model import ModelConfig, forward, load_weights
from recistseg.nifti import LabelVolume, Volume
from recistseg.pipeline import preprocess
from recistseg.prompts import embed_prompts, extract_endpoints
from toytrainer.data import make_case
from toytrainer.net import NetConfig, SegNet
from toytrainer.sample import TrainConfig, sample_case
from toytrainer.train import export_weights

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def net_and_weights(tmp_path_factory):
    net = SegNet(NetConfig(), seed=11)
    path = tmp_path_factory.mktemp("parity") / "w.lens"
    export_weights(net, path)
    return net, load_weights(path, ModelConfig())


def _engine_inputs(case, margin=32, max_patch=(16, 16, 16)):
    image = Volume(case.image, (1.0, 1.0, 1.0))
    marking = LabelVolume(case.marking, (1.0, 1.0, 1.0))
    anns = extract_endpoints(marking)
    patch, rec = preprocess(image, anns, max_patch=max_patch, margin=margin)
    return anns, patch, rec


class TestForwardParity:
    def test_logits_match_engine(self, net_and_weights):
        net, w = net_and_weights
        case = make_case(np.random.default_rng(21))
        anns, patch, rec = _engine_inputs(case)
        tokens = embed_prompts(anns, rec, w)
        want = forward(patch, tokens, w)

        with torch.no_grad():
            got = net(
                torch.from_numpy(patch),
                torch.from_numpy(np.ascontiguousarray(tokens.embeddings)),
                torch.from_numpy(np.ascontiguousarray(tokens.positions)),
            ).numpy()

        assert got.shape == want.shape == (len(anns),) + rec.patch_shape
        assert float(np.abs(got - want).max()) < 1e-3

    def test_logits_match_on_pooled_patch(self, net_and_weights):
        net, w = net_and_weights
        case = make_case(np.random.default_rng(22), shape=(48, 16, 16))
        anns, patch, rec = _engine_inputs(case)
        assert max(rec.pool) > 1
        tokens = embed_prompts(anns, rec, w)
        want = forward(patch, tokens, w)
        with torch.no_grad():
            got = net(
                torch.from_numpy(patch),
                torch.from_numpy(np.ascontiguousarray(tokens.embeddings)),
                torch.from_numpy(np.ascontiguousarray(tokens.positions)),
            ).numpy()
        assert float(np.abs(got - want).max()) < 1e-3


class TestTokenParity:
    def test_prompt_embeddings_match_engine(self, net_and_weights):
        net, w = net_and_weights
        case = make_case(np.random.default_rng(23))
        anns, _, rec = _engine_inputs(case)
        tokens = embed_prompts(anns, rec, w)
        with torch.no_grad():
            ours = net.prompt_tokens(len(anns)).numpy()
        assert np.abs(ours - tokens.embeddings).max() < 1e-6


class TestGeometryParity:
    """The sampler re-derives what the engine's preprocess does; with flips
    off and the same margin the two must agree exactly."""

    @pytest.mark.parametrize("shape,seed", [((16, 16, 16), 31), ((48, 16, 16), 32)])
    def test_patch_and_positions_match_engine(self, shape, seed):
        case = make_case(np.random.default_rng(seed), shape=shape)
        cfg = TrainConfig(flip_prob=0.0, margin_range=(32, 32))
        sample = sample_case([case], cfg, np.random.default_rng(0))

        anns, patch, rec = _engine_inputs(case, margin=32, max_patch=cfg.max_patch)
        assert rec.origin == sample.origin
        assert rec.extent == sample.extent
        assert rec.pool == sample.pool
        assert np.array_equal(patch, sample.patch)

        # weights only matter for the embedding rows; positions are geometry
        rng = np.random.default_rng(0)
        w = {"prompt.point_embed": rng.normal(0, 1, 128).astype(np.float32),
             "prompt.role_embed": rng.normal(0, 1, (2, 128)).astype(np.float32)}
        tokens = embed_prompts(anns, rec, w)
        assert np.allclose(tokens.positions, sample.token_positions, atol=1e-6)
        assert tokens.labels == sample.labels
