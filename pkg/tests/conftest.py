import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    max_examples=40,
)
settings.load_profile("default")


TINY = dict(H=16, W=16, max_disp=2.0)


@pytest.fixture(scope="session")
def tiny_dataset():
    from rectangling.data import Dataset, SynthConfig, generate_sample

    cfg = SynthConfig(n_samples=6, seed=11, **TINY)
    samples = [generate_sample(cfg, i) for i in range(cfg.n_samples)]
    return Dataset(
        I_S=np.stack([s.I_S for s in samples]),
        M_S=np.stack([s.M_S for s in samples]),
        I_R=np.stack([s.I_R for s in samples]),
        F_gt=np.stack([s.F_gt for s in samples]),
        names=[f"{i:05d}" for i in range(cfg.n_samples)],
    )


def _tiny_train_cfg(**overrides):
    from rectangling.training import TrainConfig

    base = dict(
        steps=400,
        batch_size=4,
        lr=2e-4,
        seed=21,
        base_channels=8,
        emb_dim=16,
        max_disp=TINY["max_disp"],
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_mdm(tiny_dataset):
    from rectangling.mdm import train_mdm

    model, history = train_mdm(tiny_dataset, _tiny_train_cfg())
    return model, history


@pytest.fixture(scope="session")
def tiny_cdm(tiny_dataset):
    from rectangling.cdm import train_cdm

    model, history = train_cdm(tiny_dataset, _tiny_train_cfg())
    return model, history


@pytest.fixture(scope="session")
def random_cdm():
    """Untrained (random-weight) content model for exactness contracts."""
    from rectangling.denoiser import Denoiser, NetConfig
    from rectangling.rng import philox_generator
    from rectangling.schedule import make_schedule
    from rectangling.training import TrainedModel

    net = Denoiser(NetConfig(out_channels=3, base_channels=8, emb_dim=16, init_seed=4))
    params = net.init_params()
    params.values[:] = 0.05 * philox_generator(77, 0).standard_normal(net.param_count)
    return TrainedModel(
        net=net,
        params=params,
        sched=make_schedule(1000, 1e-4, 0.02),
        meta={"task": "cdm", "train_config": {"max_disp": TINY["max_disp"]}},
    )
