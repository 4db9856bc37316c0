import numpy as np
import pytest

from panelnn.errors import ModelFormatError
from panelnn.inference import infer
from panelnn.model_io import load_model, save_model
from panelnn.network import Activation, Architecture
from panelnn.training import FitConfig, PenaltySpec, fit



@pytest.fixture
def fitted(panel):
    arch = Architecture((4, 3), 1, 2, Activation("leaky_relu", 0.05))
    model = fit(panel, panel, arch, PenaltySpec.default(arch, 0.1), FitConfig(max_epochs=200))
    return model, infer(model, panel)


def test_round_trip_is_exact(tmp_path, panel, fitted):
    model, inf = fitted
    path = tmp_path / "m.txt"
    save_model(path, model, inf, {"id": "unit", "x": ["x1"]})
    saved = load_model(path)
    assert saved.model.arch == model.arch
    assert np.array_equal(saved.model.params.flatten(), model.params.flatten())
    assert np.array_equal(saved.model.fixed_effects, model.fixed_effects)
    assert np.array_equal(saved.inference.cov.matrix, inf.cov.matrix)
    assert saved.model.lambda_tilde == model.lambda_tilde and saved.model.test_mse == model.test_mse
    assert saved.columns == {"id": ["unit"], "x": ["x1"]}
    assert np.array_equal(saved.model.predict_panel(panel), model.predict_panel(panel))
    # writing the loaded model again gives the same bytes
    again = tmp_path / "m2.txt"
    save_model(again, saved.model, saved.inference, {"id": "unit", "x": ["x1"]})
    assert again.read_bytes() == path.read_bytes()


def test_rejects_bad_files(tmp_path, fitted):
    path = tmp_path / "bad.txt"
    path.write_text("not a model\n")
    with pytest.raises(ModelFormatError):
        load_model(path)
    save_model(path, fitted[0])
    text = path.read_text().replace("top_weights float 3", "top_weights float 4")
    path.write_text(text)
    with pytest.raises(ModelFormatError):
        load_model(path)
