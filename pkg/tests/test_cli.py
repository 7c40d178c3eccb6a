from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from scdr.cli import load_config, main
from scdr.errors import ValidationError
from scdr.mapping import MappingNet, save_mapping


def small_config(out, seed=1):
    return {
        "seed": seed,
        "out": str(out),
        "synth": {"users": 120, "items": 60, "overlap_ratio": 0.25, "dim": 6,
                  "noise": 0.2, "map_kind": "tanh", "beta": 0.5, "ratings_per_user": 15},
        "pretrain": {"epochs": 10, "dim": 6, "rho": 0.05, "k": 3},
        "train": {"epochs": 40, "rho": 0.2, "k": 3},
        "landscape": {"resolution": 5, "n_samples": 50},
    }


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(*args):
    return main(list(args))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full pipeline run shared by the read-only CLI tests."""
    base = tmp_path_factory.mktemp("cli")
    out = base / "run"
    cfg = write_config(base, small_config(out))
    assert run("synth", "--config", cfg) == 0
    assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
    assert run("pretrain", "--config", cfg, "--mode", "sharpness_aware") == 0
    for method in ("emcdr", "scdr", "scdr_minus"):
        assert run("train", "--config", cfg, "--method", method) == 0
        assert run("eval", "--config", cfg, "--method", method) == 0
    assert run("attack", "--config", cfg, "--method", "scdr") == 0
    assert run("landscape", "--config", cfg, "--method", "scdr") == 0
    assert run("sharpness", "--config", cfg, "--method", "scdr") == 0
    return out, cfg


class TestPipeline:
    def test_outputs_exist(self, pipeline):
        out, _ = pipeline
        expected = [
            "source_ratings.csv", "target_ratings.csv", "scenario.json", "ground_truth.json",
            "source_model_plain.json", "target_model_plain.json",
            "source_model_sharpness_aware.json", "target_model_sharpness_aware.json",
            "mapping_emcdr.json", "mapping_scdr.json", "mapping_scdr_minus.json",
            "eval_emcdr.json", "eval_scdr.json", "eval_scdr_minus.json",
            "attack_scdr.json", "landscape_scdr.csv", "sharpness_scdr.json",
        ]
        for name in expected:
            assert (out / name).exists(), name

    def test_attack_first_row_equals_eval(self, pipeline):
        out, _ = pipeline
        attack = json.loads((out / "attack_scdr.json").read_text())
        eval_doc = json.loads((out / "eval_scdr.json").read_text())
        first = attack["entries"][0]
        assert first["epsilon"] == 0.0
        assert first["mae"] == eval_doc["mae"]
        assert first["rmse"] == eval_doc["rmse"]
        assert first["n"] == eval_doc["n"]

    def test_landscape_rows(self, pipeline):
        out, _ = pipeline
        lines = (out / "landscape_scdr.csv").read_text().splitlines()
        assert lines[0] == "zeta,gamma,loss"
        assert len(lines) == 1 + 25

    def test_refuses_overwrite_without_force(self, pipeline):
        out, cfg = pipeline
        assert run("synth", "--config", cfg) == 2
        assert run("eval", "--config", cfg, "--method", "scdr") == 2

    def test_force_overwrites(self, pipeline):
        out, cfg = pipeline
        before = digest(out / "eval_scdr.json")
        assert run("eval", "--config", cfg, "--method", "scdr", "--force") == 0
        assert digest(out / "eval_scdr.json") == before


class TestValidation:
    def test_invalid_synth_writes_nothing(self, tmp_path):
        cfg_doc = small_config(tmp_path / "run")
        cfg_doc["synth"]["overlap_ratio"] = 0.0
        cfg = write_config(tmp_path, cfg_doc)
        assert run("synth", "--config", cfg) == 2
        assert not (tmp_path / "run").exists()

    def test_missing_scenario_is_exit_4(self, tmp_path):
        cfg = write_config(tmp_path, small_config(tmp_path / "run"))
        assert run("pretrain", "--config", cfg, "--mode", "plain") == 4

    def test_missing_checkpoints_is_exit_4(self, tmp_path):
        cfg = write_config(tmp_path, small_config(tmp_path / "run"))
        assert run("synth", "--config", cfg) == 0
        assert run("eval", "--config", cfg, "--method", "emcdr") == 4

    def test_divergence_is_exit_3(self, tmp_path):
        cfg_doc = small_config(tmp_path / "run")
        cfg_doc["pretrain"]["learning_rate"] = 50.0
        cfg = write_config(tmp_path, cfg_doc)
        assert run("synth", "--config", cfg) == 0
        assert run("pretrain", "--config", cfg, "--mode", "plain") == 3
        assert not (tmp_path / "run" / "source_model_plain.json").exists()

    def test_unknown_config_key(self, tmp_path):
        cfg = write_config(tmp_path, {"sed": 1})
        assert run("synth", "--config", cfg) == 2

    def test_unknown_section_key(self, tmp_path):
        cfg = write_config(tmp_path, {"train": {"epoch": 3}})
        assert run("synth", "--config", cfg) == 2

    def test_malformed_config(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert run("synth", "--config", str(p)) == 2

    def test_missing_config_file(self, tmp_path):
        assert run("synth", "--config", str(tmp_path / "none.json")) == 4

    def test_load_config_defaults(self):
        cfg = load_config(None)
        assert cfg["train"]["hidden"] == 50
        assert cfg["attack"]["epsilons"] == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_load_config_rejects_non_object(self, tmp_path):
        p = tmp_path / "arr.json"
        p.write_text("[1, 2]")
        with pytest.raises(ValidationError):
            load_config(str(p))


class TestReproducibility:
    def test_rerun_is_byte_identical(self, tmp_path):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg_doc = small_config(out, seed=3)
            cfg_doc["pretrain"]["epochs"] = 6
            cfg_doc["train"]["epochs"] = 15
            cfg = write_config(tmp_path, cfg_doc, name=f"{name}.json")
            assert run("synth", "--config", cfg) == 0
            assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
            assert run("train", "--config", cfg, "--method", "emcdr") == 0
            assert run("eval", "--config", cfg, "--method", "emcdr") == 0
            digests.append({p.name: digest(p) for p in sorted(out.iterdir())})
        assert digests[0] == digests[1]

    def test_seed_changes_outputs(self, tmp_path):
        hashes = []
        for seed in (1, 2):
            out = tmp_path / f"s{seed}"
            cfg = write_config(tmp_path, small_config(out, seed=seed), name=f"s{seed}.json")
            assert run("synth", "--config", cfg) == 0
            hashes.append(digest(out / "source_ratings.csv"))
        assert hashes[0] != hashes[1]

    def test_seed_flag_overrides_config(self, tmp_path):
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        cfg1 = write_config(tmp_path, small_config(out1, seed=5), name="c1.json")
        cfg2 = write_config(tmp_path, small_config(out2, seed=9), name="c2.json")
        assert run("synth", "--config", cfg1) == 0
        assert run("synth", "--config", cfg2, "--seed", "5") == 0
        assert digest(out1 / "source_ratings.csv") == digest(out2 / "source_ratings.csv")

    def test_trace_is_prefix_stable_in_epochs(self, tmp_path):
        traces = []
        for name, epochs in (("short", 4), ("long", 7)):
            out = tmp_path / name
            cfg_doc = small_config(out, seed=2)
            cfg_doc["pretrain"]["epochs"] = epochs
            cfg = write_config(tmp_path, cfg_doc, name=f"{name}.json")
            assert run("synth", "--config", cfg) == 0
            assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
            traces.append((out / "source_trace_plain.csv").read_text().splitlines())
        short, long = traces
        assert long[: len(short)] == short


class TestReductions:
    def test_plain_pretrain_equals_sam_with_k_zero(self, tmp_path):
        out = tmp_path / "run"
        cfg_doc = small_config(out)
        cfg_doc["pretrain"]["k"] = 0
        cfg = write_config(tmp_path, cfg_doc)
        assert run("synth", "--config", cfg) == 0
        assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
        assert run("pretrain", "--config", cfg, "--mode", "sharpness_aware") == 0
        plain = json.loads((out / "source_model_plain.json").read_text())
        sam = json.loads((out / "source_model_sharpness_aware.json").read_text())
        assert plain["U"] == sam["U"] and plain["V"] == sam["V"]

    def test_scdr_equals_scdr_minus_with_k_zero(self, tmp_path):
        out = tmp_path / "run"
        cfg_doc = small_config(out)
        cfg_doc["pretrain"]["k"] = 0
        cfg_doc["train"]["k"] = 0
        cfg = write_config(tmp_path, cfg_doc)
        assert run("synth", "--config", cfg) == 0
        assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
        assert run("pretrain", "--config", cfg, "--mode", "sharpness_aware") == 0
        assert run("train", "--config", cfg, "--method", "scdr") == 0
        assert run("train", "--config", cfg, "--method", "scdr_minus") == 0
        a = json.loads((out / "mapping_scdr.json").read_text())
        b = json.loads((out / "mapping_scdr_minus.json").read_text())
        assert a["W1"] == b["W1"] and a["b2"] == b["b2"]
        assert a["tuned_source"] == b["tuned_source"]


class TestDefaultLandscape:
    def test_default_grid_is_441_rows(self, tmp_path):
        out = tmp_path / "run"
        cfg_doc = small_config(out)
        del cfg_doc["landscape"]  # fall back to the built-in 21x21 default
        cfg = write_config(tmp_path, cfg_doc)
        assert run("synth", "--config", cfg) == 0
        assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
        assert run("train", "--config", cfg, "--method", "emcdr") == 0
        assert run("landscape", "--config", cfg, "--method", "emcdr") == 0
        lines = (out / "landscape_emcdr.csv").read_text().splitlines()
        assert len(lines) == 1 + 441


class TestSharpnessCommand:
    def test_zero_net_checkpoint_reports_zero(self, tmp_path):
        out = tmp_path / "run"
        cfg = write_config(tmp_path, small_config(out))
        assert run("synth", "--config", cfg) == 0
        assert run("pretrain", "--config", cfg, "--mode", "plain") == 0
        d = 6
        net = MappingNet(np.zeros((50, d)), np.zeros(50), np.zeros((d, 50)), np.zeros(d))
        save_mapping(net, out / "mapping_emcdr.json", config={"method": "emcdr"})
        assert run("sharpness", "--config", cfg, "--method", "emcdr") == 0
        doc = json.loads((out / "sharpness_emcdr.json").read_text())
        assert doc["lipschitz_estimate"] == 0.0
