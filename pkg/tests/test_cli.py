"""Config parsing, the four subcommands, artifacts, and exit codes."""

import json
import math

import numpy as np
import pytest

from dzq.cli import (
    _apply_overrides,
    main,
    parse_config_file,
    resolve_config,
)
from dzq.errors import ConfigError
from dzq.models import (
    Layer,
    LayerSpec,
    Model,
    load_checkpoint,
    save_checkpoint,
    validate_model,
)
from dzq.quantizers import LayerQuantState

GOOD_CONFIG = """\
# tiny training run
[model]
recipe = mlp
input = 8
hidden = 8
classes = 2

[data]
source = synthetic
n = 64
spread = 0.1

[train]
epochs = 2
batch_size = 16
lambda_dz = 0.01
seed = 3

[output]
dir = {out}
"""


def write_config(tmp_path, text=None, out=None):
    out = out or (tmp_path / "run")
    path = tmp_path / "run.cfg"
    path.write_text((text or GOOD_CONFIG).format(out=out))
    return path, out


class TestConfigParsing:
    def test_valid_file_resolves_with_defaults(self, tmp_path):
        path, out = write_config(tmp_path)
        cfg = resolve_config(parse_config_file(path))
        assert cfg["model"]["recipe"] == "mlp"
        assert cfg["train"]["epochs"] == 2
        assert cfg["train"]["momentum"] == 0.9
        assert cfg["data"]["val_fraction"] == 0.2
        assert cfg["output"]["dir"] == str(out)

    def test_lexical_typing(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("[train]\nmixed_precision = true\nepochs = 3\n"
                        "lr_weights = 0.5\n[model]\nrecipe = mlp\n")
        sections = parse_config_file(path)
        assert sections["train"]["mixed_precision"][0] is True
        assert sections["train"]["epochs"][0] == 3
        assert sections["train"]["lr_weights"][0] == 0.5
        assert sections["model"]["recipe"][0] == "mlp"

    def test_unknown_section_reports_line(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("[model]\nrecipe = mlp\n\n[nonsense]\nx = 1\n")
        with pytest.raises(ConfigError, match="line 4"):
            parse_config_file(path)

    def test_unknown_key_reports_line(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("[train]\nepochs = 2\nlearning = 0.1\n")
        with pytest.raises(ConfigError, match="line 3.*learning"):
            parse_config_file(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("[train]\nepochs = 2\nepochs = 3\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_file(path)

    def test_key_outside_section_rejected(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("epochs = 2\n")
        with pytest.raises(ConfigError, match="outside"):
            parse_config_file(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "t.cfg"
        path.write_text("[train]\nepochs\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(path)

    def test_missing_required_key_rejected(self, tmp_path):
        path = tmp_path / "t.cfg"
        without_output = GOOD_CONFIG.split("[output]")[0]
        path.write_text(without_output)
        with pytest.raises(ConfigError, match="output.dir"):
            resolve_config(parse_config_file(path))

    def test_wrong_type_rejected(self, tmp_path):
        path, _ = write_config(
            tmp_path, GOOD_CONFIG.replace("epochs = 2", "epochs = soon"))
        with pytest.raises(ConfigError, match="epochs"):
            resolve_config(parse_config_file(path))

    def test_int_promotes_to_float(self, tmp_path):
        path, _ = write_config(
            tmp_path, GOOD_CONFIG.replace("seed = 3", "lr_weights = 1"))
        cfg = resolve_config(parse_config_file(path))
        assert cfg["train"]["lr_weights"] == 1.0
        assert isinstance(cfg["train"]["lr_weights"], float)


class TestOverrides:
    def test_override_replaces_value(self, tmp_path):
        path, _ = write_config(tmp_path)
        sections = parse_config_file(path)
        _apply_overrides(sections, ["train.epochs=5", "train.fp32=true"])
        cfg = resolve_config(sections)
        assert cfg["train"]["epochs"] == 5
        assert cfg["train"]["fp32"] is True

    def test_unknown_target_rejected(self, tmp_path):
        path, _ = write_config(tmp_path)
        sections = parse_config_file(path)
        with pytest.raises(ConfigError, match="unknown override"):
            _apply_overrides(sections, ["train.warp=9"])

    def test_malformed_override_rejected(self, tmp_path):
        path, _ = write_config(tmp_path)
        sections = parse_config_file(path)
        with pytest.raises(ConfigError, match="section.key"):
            _apply_overrides(sections, ["epochs=5"])


class TestTrainCommand:
    def test_artifacts_and_manifest(self, tmp_path):
        path, out = write_config(tmp_path)
        assert main(["train", "--config", str(path)]) == 0
        for name in ("checkpoint.cdq", "history.csv", "layers.csv",
                     "report.json", "manifest.json"):
            assert (out / name).exists(), name

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "train"
        import hashlib
        for name, digest in manifest["artifacts"].items():
            got = hashlib.sha256((out / name).read_bytes()).hexdigest()
            assert got == digest, name

        history = (out / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_acc,val_acc,loss,overall_sparsity,mean_bits"
        assert len(history) == 3

        layers = (out / "layers.csv").read_text().splitlines()
        assert layers[0].startswith("epoch,layer,kind,")
        assert ",fc0,linear," in layers[1]

        model, mode = load_checkpoint(out / "checkpoint.cdq")
        assert mode == "quant"
        assert [l.spec.out_features for l in model.layers] == [8, 2]

    def test_reruns_byte_identical(self, tmp_path):
        path_a, out_a = write_config(tmp_path)
        main(["train", "--config", str(path_a)])
        out_b = tmp_path / "run_b"
        main(["train", "--config", str(path_a), "--out", str(out_b)])
        assert (out_a / "checkpoint.cdq").read_bytes() == \
            (out_b / "checkpoint.cdq").read_bytes()
        assert (out_a / "history.csv").read_text() == \
            (out_b / "history.csv").read_text()
        assert (out_a / "layers.csv").read_text() == \
            (out_b / "layers.csv").read_text()

    def test_seed_flag_changes_outcome(self, tmp_path):
        path, out = write_config(tmp_path)
        main(["train", "--config", str(path)])
        out_b = tmp_path / "run_seeded"
        main(["train", "--config", str(path), "--out", str(out_b),
              "--seed", "11"])
        assert (out / "checkpoint.cdq").read_bytes() != \
            (out_b / "checkpoint.cdq").read_bytes()

    def test_override_flows_into_run(self, tmp_path):
        path, out = write_config(tmp_path)
        main(["train", "--config", str(path), "--override", "train.fp32=true"])
        _, mode = load_checkpoint(out / "checkpoint.cdq")
        assert mode == "fp32"
        report = json.loads((out / "report.json").read_text())
        assert report["mode"] == "fp32"

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nepochs = -3\n")
        assert main(["train", "--config", str(path)]) == 2

    def test_divergence_exits_3(self, tmp_path, capsys):
        path, _ = write_config(tmp_path)
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", str(path),
                         "--override", "train.lr_weights=1e300",
                         "--override", "train.cosine_lr=false"])
        assert code == 3
        assert "diverged" in capsys.readouterr().err


class TestVerifyCommand:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        code = main(["verify", "--trials", "200",
                     "--out", str(tmp_path / "v")])
        assert code == 0
        shown = capsys.readouterr().out
        assert "PASS" in shown and "FAIL" not in shown
        payload = json.loads((tmp_path / "v" / "verify.json").read_text())
        assert len(payload) == 6
        assert all(entry["passed"] for entry in payload)

    def test_fault_injection_fails_with_counterexample(self, tmp_path, capsys):
        code = main(["verify", "--trials", "200",
                     "--out", str(tmp_path / "v"),
                     "--override", "round_mode=away"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out
        payload = json.loads((tmp_path / "v" / "verify.json").read_text())
        failed = [e for e in payload if not e["passed"]]
        assert failed and failed[0]["counterexample"]

    def test_zero_trials_warns(self, tmp_path, capsys):
        code = main(["verify", "--trials", "0", "--out", str(tmp_path / "v")])
        assert code == 0
        assert "vacuously" in capsys.readouterr().out


def planted_checkpoint(tmp_path):
    """Single linear layer where exactly 4 of 16 weights survive pruning
    at theta = atanh(0.5) (dead zone d = R, threshold R/2)."""
    weight = np.full((8, 2), 0.1)
    flat = weight.reshape(-1)
    flat[0], flat[1], flat[2], flat[3] = 1.0, 0.9, -0.8, -0.95
    spec = LayerSpec(kind="linear", in_features=8, out_features=2)
    layer = Layer("fc0", spec, weight, np.zeros(2),
                  LayerQuantState(theta_dz=math.atanh(0.5), fixed_bits=4,
                                  quantile=1.0))
    model = validate_model(Model(input_shape=(8,), layers=[layer]))
    path = tmp_path / "planted.cdq"
    save_checkpoint(model, path, mode="quant")
    return path


class TestBopsCommand:
    def test_planted_density_and_relative_bops(self, tmp_path, capsys):
        path = planted_checkpoint(tmp_path)
        code = main(["bops", str(path), "--out", str(tmp_path / "b")])
        assert code == 0
        report = json.loads((tmp_path / "b" / "bops.json").read_text())
        layer = report["layers"][0]
        assert layer["density"] == 0.25
        assert layer["w_bits"] == 4
        np.testing.assert_allclose(report["relative_bops"], 0.25 * 4 / 32,
                                   rtol=1e-12)
        assert "fc0" in capsys.readouterr().out

    def test_missing_checkpoint_exits_2(self, tmp_path):
        assert main(["bops", str(tmp_path / "ghost.cdq")]) == 2

    def test_corrupt_checkpoint_exits_2(self, tmp_path, capsys):
        path = tmp_path / "junk.cdq"
        path.write_bytes(b"garbage")
        assert main(["bops", str(path)]) == 2
        assert "input error" in capsys.readouterr().err


class TestQuantizeCommand:
    def test_theta_zero_prunes_everything(self, tmp_path):
        src = planted_checkpoint(tmp_path)
        out = tmp_path / "q"
        code = main(["quantize", str(src), "--theta", "0", "--bits", "4",
                     "--out", str(out)])
        assert code == 0
        model, mode = load_checkpoint(out / "checkpoint.cdq")
        assert mode == "quant"
        assert np.all(model.layers[0].weight == 0.0)
        report = json.loads((out / "report.json").read_text())
        assert report["overall_sparsity"] == 1.0

    def test_width_flag_sets_threshold(self, tmp_path):
        src = planted_checkpoint(tmp_path)
        out = tmp_path / "q"
        # R = 1.0, so --d 1.0 prunes |w| <= 0.5: the 12 planted 0.1 weights
        code = main(["quantize", str(src), "--d", "1.0", "--bits", "4",
                     "--out", str(out)])
        assert code == 0
        model, _ = load_checkpoint(out / "checkpoint.cdq")
        flat = model.layers[0].weight.reshape(-1)
        assert np.count_nonzero(flat) == 4
        np.testing.assert_allclose(model.layers[0].state.theta_dz,
                                   math.atanh(0.5), rtol=1e-12)

    def test_width_zero_keeps_everything(self, tmp_path):
        src = planted_checkpoint(tmp_path)
        out = tmp_path / "q"
        assert main(["quantize", str(src), "--d", "0", "--bits", "8",
                     "--out", str(out)]) == 0
        model, _ = load_checkpoint(out / "checkpoint.cdq")
        assert np.count_nonzero(model.layers[0].weight) == 16

    def test_exactly_one_width_source(self, tmp_path, capsys):
        src = planted_checkpoint(tmp_path)
        assert main(["quantize", str(src), "--theta", "1", "--d", "0.5"]) == 2
        assert main(["quantize", str(src)]) == 2

    def test_bits_out_of_range_exits_2(self, tmp_path):
        src = planted_checkpoint(tmp_path)
        assert main(["quantize", str(src), "--theta", "1", "--bits", "1"]) == 2

    def test_width_beyond_range_exits_2(self, tmp_path):
        src = planted_checkpoint(tmp_path)
        assert main(["quantize", str(src), "--d", "99"]) == 2
