import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eegvlm.stages import CLASS_ORDER
from eegvlm.synthetic import balanced_stages, fixture_recording

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_stages():
    """The bundled 50-epoch fixture: 10 epochs of each class."""
    return balanced_stages(10, seed=0)


@pytest.fixture(scope="session")
def fixture_edf(fixture_stages):
    return fixture_recording(fixture_stages, seed=0)


@pytest.fixture(scope="session")
def class_order():
    return CLASS_ORDER


def render_cot_inputs(stages, seed=0):
    """Render a synthetic recording of ``stages`` into in-memory PNG CoT inputs."""
    import io

    from PIL import Image

    from eegvlm.cot import CotInput
    from eegvlm.preprocess import FilterSpec, apply_filter, design_bandpass, segment_epochs
    from eegvlm.render import render_epoch
    from eegvlm.synthetic import synth_signal

    x = apply_filter(synth_signal(stages, 100.0, seed), design_bandpass(FilterSpec(100.0)))
    items = []
    for ep in segment_epochs(x, 100.0, stages, "fixture"):
        buf = io.BytesIO()
        Image.fromarray(render_epoch(ep).pixels, "RGB").save(buf, format="PNG")
        items.append(CotInput(f"fixture_{ep.epoch_index}_{ep.stage.value}.png", buf.getvalue(), ep.stage))
    return items


@pytest.fixture(scope="session")
def cot_inputs(fixture_stages):
    return render_cot_inputs(fixture_stages)


@pytest.fixture(scope="session")
def cot_truth(cot_inputs):
    from eegvlm.cot import image_digest

    return {image_digest(i.image_png): i.ground_truth for i in cot_inputs}


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``record(number, name, passed, detail)``; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, name, passed, detail=""):
        line = f"ACCEPTANCE {number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
