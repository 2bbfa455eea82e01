import pytest
import torch

from cvton_lab import data as D
from cvton_lab.training import TrainConfig

torch.set_num_threads(1)

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}: {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Attach a short measurement summary to the acceptance line of this test."""

    def _record(text: str) -> None:
        request.node.criterion_detail = text

    return _record


@pytest.fixture(scope="session")
def tiny_spec():
    return D.ToySpec(n_train=16, n_test=6, seed=7)


@pytest.fixture(scope="session")
def tiny_train(tiny_spec):
    return D.toy_split(tiny_spec, "train")


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_spec):
    return D.generate_toy_dataset(tiny_spec, tmp_path_factory.mktemp("toy"))


@pytest.fixture
def tiny_cfg():
    """Toy shapes with very small networks for fast end-to-end checks."""
    return TrainConfig(
        batch_size=4,
        bpgm_encoder_widths=(8, 8, 8),
        bpgm_regressor_widths=(8, 8, 8, 8),
        gen_widths=(16, 16, 16, 16, 8, 8),
        gen_hidden=8,
        dseg_widths=(8, 8, 8, 8, 8, 8),
        dmth_widths=(8, 8, 8, 8, 8, 8),
        dptc_widths=(8, 8, 8, 8),
    )


def _paired_perceptual(pipe, dataset, fx) -> float:
    from cvton_lab import metrics

    vals = []
    for batch in D.iterate_batches(dataset, 25):
        vals.append(float(metrics.perceptual_loss(pipe(batch, "own_garment"), batch["person"], fx)) * len(batch["ids"]))
    return sum(vals) / len(dataset)


@pytest.fixture(scope="session")
def trained_run():
    """Train both stages on the 64x48 toy set (200 train / 50 test) and measure.

    Matcher: 10 epochs. Generator: 20 epochs. Returns a dict with the loss
    logs, per-pair shape losses, perceptual losses before and after, FIDs and
    the elapsed time, plus a copy of the frozen matcher.
    """
    import copy
    import time

    import numpy as np

    from cvton_lab import metrics
    from cvton_lab.matcher import loss_shape
    from cvton_lab.training import BpgmTrainer, GanTrainer, toy_config

    start = time.perf_counter()
    spec = D.ToySpec()
    train = D.toy_split(spec, "train")
    test_paired = D.toy_split(spec, "test")
    test_unpaired = D.toy_split(spec, "test", "shuffled", seed=0)
    cfg = toy_config(seed=0)

    bpgm = BpgmTrainer(cfg)
    bpgm.run(train, 10)
    matcher = bpgm.matcher.eval()
    shp_trained, shp_identity = [], []
    with torch.no_grad():
        for batch in D.iterate_batches(test_paired, 1):
            _, _, m_w = matcher(batch["own_garment"], batch["seg"], batch["own_garment_mask"])
            shp_trained.append(float(loss_shape(m_w, batch["m_c"])))
            shp_identity.append(float(loss_shape(batch["own_garment_mask"], batch["m_c"])))

    fx = metrics.default_extractor(cfg.extractor_seed)
    gan = GanTrainer(cfg, matcher, fx)
    per_initial = _paired_perceptual(gan.pipeline(use_ema=False), test_paired, fx)
    gan.run(train, 20)
    pipe = gan.pipeline(use_ema=True)
    per_final = _paired_perceptual(pipe, test_paired, fx)
    per_final_live = _paired_perceptual(gan.pipeline(use_ema=False), test_paired, fx)

    gen_report = metrics.evaluate_testset(pipe, D.iterate_batches(test_unpaired, 25), "unpaired", fx)
    gray_report = metrics.evaluate_testset(lambda b: torch.zeros_like(b["person"]),
                                           D.iterate_batches(test_unpaired, 25), "unpaired", fx)
    return {
        "config": cfg,
        "train": train,
        "test_paired": test_paired,
        "bpgm_log": bpgm.history,
        "gan_log": gan.history,
        "shp_trained": np.array(shp_trained),
        "shp_identity": np.array(shp_identity),
        "per_initial": per_initial,
        "per_final": per_final,
        "per_final_live": per_final_live,
        "fid_generated": gen_report.fid,
        "fid_gray": gray_report.fid,
        "pipeline": pipe,
        "matcher": copy.deepcopy(matcher),
        "seconds": time.perf_counter() - start,
    }
