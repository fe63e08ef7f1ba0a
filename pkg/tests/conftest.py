import pytest

from jgseg.config import resolve_config
from jgseg.data import generate_dataset, make_recipe, split
from jgseg.encoder import build_encoder
from jgseg.generator import GeneratorConfig, build_generator

MICRO = [
    "data.resolution=16", "data.count=120", "data.k=4", "data.n=60", "data.val=8", "data.test=16",
    "gen.channels=[16,16,8]", "gen.d_z=16", "gen.d_w=16", "gen.mapping_width=16", "gen.mapping_layers=2",
    "disc.channels=[8,16,16]", "disc.dm_layers=2", "disc.dm_channels=8",
    "enc.channels=[8,16,16,16]", "enc.fpn_channels=8",
    "train.batch_u=4", "train.batch_l=2", "train.w_avg_samples=200", "train.ckpt_every=0",
    "train.sample_every=0", "train.log_every=5", "invert.steps=5",
    "loss.perceptual_channels=[4,8,8]",
    "eval.baseline_channels=[4,4,8,8]",
]


@pytest.fixture
def micro_cfg():
    return resolve_config(None, MICRO)


def tiny_gcfg(c_img=1, c_cls=2, resolution=8, **kw):
    kw.setdefault("channels", [8, 4])
    return GeneratorConfig(resolution=resolution, d_z=8, d_w=8, mapping_layers=2, mapping_width=8,
                           c_img=c_img, c_cls=c_cls, **kw)


@pytest.fixture
def tiny_G():
    return build_generator(tiny_gcfg(), seed=3)


@pytest.fixture
def tiny_E(tiny_G):
    class _Cfg:
        channels = [4, 8, 8, 8]
        fpn_channels = 4
    g = tiny_G.cfg
    return build_encoder(g.resolution, g.c_img, g.n_levels, g.d_w, _Cfg, seed=4)


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs16")
    m = generate_dataset(make_recipe("BLOBS-A", 16), 120, root)
    return split(m, 4, 60, 8, 16, seed=0)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
