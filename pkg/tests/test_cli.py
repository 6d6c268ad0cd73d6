import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from styleswap import ckpt, pretrain, synth, training
from styleswap.cli import (
    CliError,
    _DATASET_KEYS,
    _TRAIN_KEYS,
    main,
    mask_was_trained,
    parse_config,
)
from styleswap.networks import GeneratorConfig


def write_config(tmp_path, text: str) -> str:
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, ""), {}, _TRAIN_KEYS)
        assert cfg["lambda_id"] == 10.0
        assert cfg["learning_rate"] == 1e-4
        assert cfg["steps"] == 20000

    def test_no_file_gives_defaults(self):
        cfg = parse_config(None, {}, _TRAIN_KEYS)
        assert cfg["lambda_fm"] == 100.0

    def test_flag_overrides_file(self, tmp_path):
        path = write_config(tmp_path, "steps = 100\n")
        cfg = parse_config(path, {"steps": "200"}, _TRAIN_KEYS)
        assert cfg["steps"] == 200

    def test_comments_and_blank_lines(self, tmp_path):
        path = write_config(tmp_path, "# a comment\n\nsteps = 7 # trailing\n")
        assert parse_config(path, {}, _TRAIN_KEYS)["steps"] == 7

    def test_unknown_key_named(self, tmp_path):
        path = write_config(tmp_path, "stepz = 100\n")
        with pytest.raises(CliError, match="stepz"):
            parse_config(path, {}, _TRAIN_KEYS)

    def test_unparseable_value(self, tmp_path):
        path = write_config(tmp_path, "steps = soon\n")
        with pytest.raises(CliError, match="steps"):
            parse_config(path, {}, _TRAIN_KEYS)

    def test_malformed_line(self, tmp_path):
        path = write_config(tmp_path, "just some words\n")
        with pytest.raises(CliError):
            parse_config(path, {}, _TRAIN_KEYS)

    def test_int_list_values(self, tmp_path):
        path = write_config(tmp_path, "channels = 8, 8, 6\n")
        assert parse_config(path, {}, _TRAIN_KEYS)["channels"] == [8, 8, 6]

    def test_env_seed_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STYLESWAP_SEED", "77")
        assert parse_config(None, {}, _DATASET_KEYS)["seed"] == 77
        # explicit flag beats the environment
        assert parse_config(None, {"seed": "3"}, _DATASET_KEYS)["seed"] == 3
        # explicit file key beats the environment
        path = write_config(tmp_path, "seed = 5\n")
        assert parse_config(path, {}, _DATASET_KEYS)["seed"] == 5


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("cli") / "data")
    rc = main(
        [
            "synth-data",
            "--out",
            out,
            "--num-identities",
            "3",
            "--frames-per-identity",
            "3",
            "--resolution",
            "16",
            "--seed",
            "4",
        ]
    )
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def tiny_run(data_dir, tmp_path_factory):
    """A two-step training run with the mask stage active from step 1."""
    out = str(tmp_path_factory.mktemp("cli") / "run")
    rc = main(
        [
            "train",
            "--data",
            data_dir,
            "--out",
            out,
            "--steps",
            "2",
            "--batch-size",
            "2",
            "--mask-stage-start",
            "1",
            "--checkpoint-interval",
            "2",
            "--num-blocks",
            "3",
            "--style-dim",
            "8",
            "--channels",
            "6,6,6",
            "--attribute-channels",
            "3,3,3",
        ]
    )
    assert rc == 0
    return out, os.path.join(out, "ckpt-2.bin")


class TestSynthData:
    def test_writes_dataset_and_config(self, data_dir):
        assert os.path.exists(os.path.join(data_dir, "spec.json"))
        assert os.path.exists(os.path.join(data_dir, "resolved-config.txt"))
        ds = synth.load_dataset(data_dir)
        assert ds.num_identities == 3 and ds.spec.resolution == 16

    def test_resolved_config_content(self, data_dir):
        text = open(os.path.join(data_dir, "resolved-config.txt")).read()
        assert "num_identities = 3" in text
        assert "seed = 4" in text


class TestTrain:
    def test_run_artifacts(self, tiny_run):
        out, ckpt_path = tiny_run
        assert os.path.exists(ckpt_path)
        assert os.path.exists(os.path.join(out, "log.jsonl"))
        assert os.path.exists(os.path.join(out, "resolved-config.txt"))
        state = training.load_checkpoint(ckpt_path)
        assert state.step == 2
        assert state.model.config.num_blocks == 3

    def test_resolution_mismatch_fails(self, data_dir, tmp_path, capsys):
        rc = main(["train", "--data", data_dir, "--out", str(tmp_path / "x"), "--steps", "1"])
        assert rc == 1
        assert "resolution" in capsys.readouterr().err

    def test_unknown_config_key_fails(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("stepz = 5\n")
        rc = main(
            ["train", "--data", data_dir, "--out", str(tmp_path / "y"), "--config", str(cfg)]
        )
        assert rc == 1
        assert "stepz" in capsys.readouterr().err


class TestSwap:
    def test_single_target(self, tiny_run, data_dir, tmp_path):
        out, ckpt_path = tiny_run
        src = str(tmp_path / "src.png")
        tgt = str(tmp_path / "tgt.png")
        ds = synth.load_dataset(data_dir)
        for path, arr in ((src, ds.images[0, 0]), (tgt, ds.images[1, 1])):
            Image.fromarray(((arr + 1) * 127.5).clip(0, 255).astype(np.uint8)).save(path)
        swap_out = str(tmp_path / "swapped")
        rc = main(["swap", "--ckpt", ckpt_path, "--source", src, "--target", tgt, "--out", swap_out])
        assert rc == 0
        assert os.path.exists(os.path.join(swap_out, "swap.png"))
        assert os.path.exists(os.path.join(swap_out, "mask.png"))
        with Image.open(os.path.join(swap_out, "swap.png")) as im:
            assert im.size == (16, 16)

    def test_directory_targets_in_name_order(self, tiny_run, data_dir, tmp_path):
        out, ckpt_path = tiny_run
        ds = synth.load_dataset(data_dir)
        src = str(tmp_path / "src.png")
        Image.fromarray(((ds.images[0, 0] + 1) * 127.5).astype(np.uint8)).save(src)
        tdir = tmp_path / "frames"
        tdir.mkdir()
        for name, arr in (("b.png", ds.images[1, 0]), ("a.png", ds.images[2, 0])):
            Image.fromarray(((arr + 1) * 127.5).astype(np.uint8)).save(str(tdir / name))
        swap_out = str(tmp_path / "video")
        rc = main(["swap", "--ckpt", ckpt_path, "--source", src, "--target", str(tdir), "--out", swap_out])
        assert rc == 0
        names = sorted(os.listdir(swap_out))
        assert names == ["a.mask.png", "a.swap.png", "b.mask.png", "b.swap.png"]

    def test_bad_checkpoint_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not a checkpoint")
        rc = main(["swap", "--ckpt", str(bad), "--source", "x.png", "--target", "y.png", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert capsys.readouterr().err


class TestInvert:
    def test_writes_styles_and_trace(self, tiny_run, data_dir, tmp_path):
        out, ckpt_path = tiny_run
        ds = synth.load_dataset(data_dir)
        src = str(tmp_path / "src.png")
        tgt = str(tmp_path / "tgt.png")
        Image.fromarray(((ds.images[0, 0] + 1) * 127.5).astype(np.uint8)).save(src)
        Image.fromarray(((ds.images[1, 0] + 1) * 127.5).astype(np.uint8)).save(tgt)
        styles_path = str(tmp_path / "styles.bin")
        rc = main(
            [
                "invert",
                "--ckpt",
                ckpt_path,
                "--data",
                data_dir,
                "--source",
                src,
                "--target",
                tgt,
                "--out",
                styles_path,
                "--iterations",
                "2",
                "--pool-size",
                "2",
            ]
        )
        assert rc == 0
        arrays, header = ckpt.load_arrays(styles_path)
        assert header["kind"] == "styles"
        assert arrays["w_plus"].shape == (6, 8)  # 2L rows for L=3 blocks
        trace = [json.loads(l) for l in open(str(tmp_path / "styles.trace.jsonl"))]
        assert [t["iteration"] for t in trace] == [1, 2]

        # the styles file feeds back into swap
        swap_out = str(tmp_path / "restyled")
        rc = main(
            ["swap", "--ckpt", ckpt_path, "--source", src, "--target", tgt, "--styles", styles_path, "--out", swap_out]
        )
        assert rc == 0
        assert os.path.exists(os.path.join(swap_out, "swap.png"))

    def test_one_to_one_requires_target(self, tiny_run, data_dir, tmp_path, capsys):
        out, ckpt_path = tiny_run
        rc = main(
            ["invert", "--ckpt", ckpt_path, "--data", data_dir, "--source", "s.png", "--out", str(tmp_path / "w.bin")]
        )
        assert rc == 1
        assert "target" in capsys.readouterr().err


class TestMaskPresence:
    def test_mask_was_trained(self):
        header = {"step": 10, "train_config": {"mask_stage_start": 5}}
        assert mask_was_trained(header)
        header = {"step": 10, "train_config": {"mask_stage_start": 10}}
        assert not mask_was_trained(header)


class TestStylesBroadcastEquivalence:
    def test_tiled_styles_match_plain_swap(self, tiny_run, data_dir, tmp_path):
        out, ckpt_path = tiny_run
        model, header = training.load_model(ckpt_path)
        ds = synth.load_dataset(data_dir)
        src = training.to_tensor(ds.images[0, 0])
        tgt = training.to_tensor(ds.images[1, 1])
        with torch.no_grad():
            w = model.identity_style(src)
            tiled = w.unsqueeze(1).repeat(1, model.config.num_style_slots, 1)
            base = model.swap(src, tgt, mask_enabled=True)
            pyramid = model.attribute_encoder(tgt)
            restyled = model.generator(pyramid, tiled, mask_enabled=True, target=tgt)
        assert torch.equal(base.blended, restyled.blended)
