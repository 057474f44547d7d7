import pytest
import torch

from deskqlora import synthgen
from deskqlora.config import RunConfig
from deskqlora.corpus import build_prompt, stratified_split
from deskqlora.model import ModelConfig, QLoraModel
from deskqlora.numerics import Rng
from deskqlora.trainkit import encode_example

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def stub_data():
    registry = synthgen.TopicRegistry.from_file(RunConfig().registry_path())
    return synthgen.generate_datasets(registry, synthgen.StubGenerator(0), Rng(0), max_workers=2)


@pytest.fixture(scope="session")
def qgen_examples(stub_data):
    train, val, _ = stratified_split(stub_data.qgen, seed=0)
    enc = lambda rs: [encode_example(build_prompt(r), 768) for r in rs]
    return enc(train), enc(val)


def randomize_adapters(model: QLoraModel, seed: int = 0, scale: float = 0.05) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for t in model.adapter_set.named_tensors().values():
            t.copy_(torch.randn(t.shape, generator=g, dtype=torch.float64).to(t.dtype) * scale)


@pytest.fixture
def toy_model():
    return QLoraModel.build(ModelConfig(), seed=0)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, f"criterion {n}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
