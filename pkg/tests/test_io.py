"""File formats, run configuration, and the CLI surface end to end."""

import json
import struct

import numpy as np
import pytest

from vitnas import checkpoint as cp
from vitnas import supernet as sn
from vitnas.autograd import AdamW
from vitnas.cli import main
from vitnas.dataio import Dataset, load_dataset, save_dataset, synth_dataset
from vitnas.errors import DataError, SpecError
from vitnas.runconfig import load_runconfig, parse_runconfig
from vitnas.space import parse_arch_key

from oracles import linear_probe_accuracy
from test_supernet import small_geom, small_spec


class TestDatasetFormat:
    def test_same_seed_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.afds", tmp_path / "b.afds"
        save_dataset(p1, synth_dataset(classes=4, samples=32, size=8, seed=3))
        save_dataset(p2, synth_dataset(classes=4, samples=32, size=8, seed=3))
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_arithmetic_equals_length(self, tmp_path):
        p = tmp_path / "d.afds"
        ds = synth_dataset(classes=5, samples=17, size=8, seed=0, channels=2)
        save_dataset(p, ds)
        n, h, w, c = 17, 8, 8, 2
        assert p.stat().st_size == 5 + 20 + n * h * w * c + n

    def test_round_trip(self, tmp_path):
        p = tmp_path / "d.afds"
        ds = synth_dataset(classes=3, samples=10, size=8, seed=1)
        save_dataset(p, ds)
        back = load_dataset(p)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert back.classes == ds.classes

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "d.afds"
        save_dataset(p, synth_dataset(classes=3, samples=4, size=8, seed=1))
        blob = bytearray(p.read_bytes())
        blob[0] = ord(b"X")
        p.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="magic"):
            load_dataset(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "d.afds"
        save_dataset(p, synth_dataset(classes=3, samples=4, size=8, seed=1))
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(DataError, match="length"):
            load_dataset(p)

    def test_label_out_of_range_rejected(self, tmp_path):
        p = tmp_path / "d.afds"
        ds = synth_dataset(classes=3, samples=4, size=8, seed=1)
        blob = bytearray()
        blob += b"AFDS1" + struct.pack("<5I", 4, 8, 8, 1, 2)  # claims 2 classes
        blob += ds.images.tobytes() + ds.labels.tobytes()
        p.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="num_classes"):
            load_dataset(p)

    def test_balanced_classes(self):
        ds = synth_dataset(classes=8, samples=100, size=8, seed=2)
        counts = np.bincount(ds.labels, minlength=8)
        assert counts.max() - counts.min() <= 1

    def test_linear_probe_beats_chance(self):
        ds = synth_dataset(classes=8, samples=640, size=16, seed=4)
        acc = linear_probe_accuracy(ds.images, ds.labels, 8)
        assert acc > 2.0 / 8.0  # well above the 12.5% chance level


class TestCheckpointFormat:
    def _store(self, with_opt=False):
        store = sn.build(small_spec(), small_geom(), init_seed=1)
        opt = None
        if with_opt:
            opt = AdamW(lr=1e-3)
            name = "patch.w"
            arr = store.tensors[name]
            opt.step([(name, arr, (slice(0, 4), slice(0, 8)),
                       np.ones((4, 8), dtype=np.float32), True)])
        return store, opt

    def test_round_trip_bit_identical(self, tmp_path):
        store, opt = self._store(with_opt=True)
        p = tmp_path / "s.vnck"
        rng_states = {"arch": np.random.default_rng(0).bit_generator.state,
                      "data": np.random.default_rng(1).bit_generator.state}
        cp.save_checkpoint(p, store, epoch=3, opt=opt, rng_states=rng_states,
                           train_config={"seed": 0})
        ck = cp.load_checkpoint(p)
        assert ck.epoch == 3
        assert ck.rng_states == rng_states
        assert set(ck.store.tensors) == set(store.tensors)
        for k in store.tensors:
            assert np.array_equal(ck.store.tensors[k], store.tensors[k]), k
        for name, slot in opt.state.items():
            for part in ("m", "v", "t"):
                assert np.array_equal(ck.opt_state[name][part], slot[part])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        store, opt = self._store(with_opt=True)
        p1, p2 = tmp_path / "a.vnck", tmp_path / "b.vnck"
        cp.save_checkpoint(p1, store, epoch=1, opt=opt)
        ck = cp.load_checkpoint(p1)
        opt2 = AdamW(lr=1e-3)
        cp.restore_optimizer(opt2, ck.opt_state)
        cp.save_checkpoint(p2, ck.store, epoch=1, opt=opt2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "s.vnck"
        store, _ = self._store()
        cp.save_checkpoint(p, store)
        blob = bytearray(p.read_bytes())
        blob[0] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="magic"):
            cp.load_checkpoint(p)

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "s.vnck"
        store, _ = self._store()
        cp.save_checkpoint(p, store)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError, match="length|manifest"):
            cp.load_checkpoint(p)

    def test_manifest_gap_detected(self, tmp_path):
        p = tmp_path / "s.vnck"
        store, _ = self._store()
        cp.save_checkpoint(p, store)
        blob = p.read_bytes()
        (hlen,) = struct.unpack_from("<I", blob, 6)
        header = json.loads(blob[10:10 + hlen].decode())
        header["manifest"][1][2] += 4  # shift one offset
        new_header = json.dumps(header, sort_keys=True).encode()
        p.write_bytes(blob[:6] + struct.pack("<I", len(new_header)) + new_header
                      + blob[10 + hlen:])
        with pytest.raises(DataError, match="gap"):
            cp.load_checkpoint(p)

    def test_disjoint_round_trip(self, tmp_path):
        store = sn.build_disjoint(small_spec(), small_geom(), init_seed=2)
        p = tmp_path / "d.vnck"
        cp.save_checkpoint(p, store, epoch=0)
        ck = cp.load_checkpoint(p)
        assert isinstance(ck.store, sn.DisjointStore)
        for k in store.tensors:
            assert np.array_equal(ck.store.tensors[k], store.tensors[k])

    def test_gelu_form_and_dtype_serialized(self, tmp_path):
        store = sn.build(small_spec(), small_geom(), init_seed=0, gelu_form="erf")
        p = tmp_path / "s.vnck"
        cp.save_checkpoint(p, store)
        ck = cp.load_checkpoint(p)
        assert ck.store.gelu_form == "erf"
        assert ck.store.dtype == np.float32


class TestRunConfig:
    def test_full_document(self, tmp_path):
        doc = {
            "space": {"preset": "tiny"},
            "data": {"train": "t.afds", "val": "v.afds", "patch": 8},
            "train": {"epochs": 2, "batch_size": 16, "seed": 5},
            "search": {"population_size": 4, "generations": 1, "num_parents": 2},
            "output": {"dir": "out"},
            "gelu_form": "erf",
        }
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(doc))
        cfg = load_runconfig(p)
        assert cfg.train.epochs == 2
        assert cfg.search.population_size == 4
        assert cfg.gelu_form == "erf"
        assert cfg.space.embed_choices() == [192, 216, 240]

    def test_unknown_keys_rejected_everywhere(self):
        base = {"space": {"preset": "tiny"}}
        with pytest.raises(SpecError, match="sections"):
            parse_runconfig({**base, "extra": 1})
        with pytest.raises(SpecError, match="data"):
            parse_runconfig({**base, "data": {"trin": "x"}})
        with pytest.raises(SpecError, match="train"):
            parse_runconfig({**base, "train": {"lr": 1}})
        with pytest.raises(SpecError, match="search"):
            parse_runconfig({**base, "search": {"pop": 1}})
        with pytest.raises(SpecError, match="output"):
            parse_runconfig({**base, "output": {"path": "x"}})

    def test_space_required(self):
        with pytest.raises(SpecError, match="space"):
            parse_runconfig({})

    def test_explicit_space_triples(self):
        cfg = parse_runconfig({"space": {
            "embed_dim": [8, 16, 8], "qkv_dim": [4, 8, 4], "mlp_ratio": [1, 2, 1],
            "num_heads": [1, 2, 1], "depth": [1, 2, 1]}})
        assert cfg.space.embed_choices() == [8, 16]

    def test_env_var_overrides_output(self, monkeypatch, tmp_path):
        cfg = parse_runconfig({"space": {"preset": "tiny"}, "output": {"dir": "x"}})
        monkeypatch.setenv("VITNAS_OUTDIR", str(tmp_path / "yy"))
        assert cfg.resolve_output_dir() == tmp_path / "yy"


# -- CLI end to end ------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """One tiny synth+train+search+eval pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    train_p, val_p = root / "train.afds", root / "val.afds"
    assert main(["synth", "--out", str(train_p), "--classes", "3", "--samples", "96",
                 "--size", "8", "--seed", "0"]) == 0
    assert main(["synth", "--out", str(val_p), "--classes", "3", "--samples", "48",
                 "--size", "8", "--seed", "1"]) == 0
    doc = {
        "space": {"embed_dim": [8, 16, 8], "qkv_dim": [4, 8, 4],
                  "mlp_ratio": [1, 2, 1], "num_heads": [1, 2, 1],
                  "depth": [1, 2, 1]},
        "data": {"train": str(train_p), "val": str(val_p), "patch": 4},
        "train": {"epochs": 2, "batch_size": 32, "base_lr": 3e-3,
                  "warmup_epochs": 1, "seed": 11, "probe_every": 0,
                  "eval_batch": 64},
        "search": {"population_size": 6, "generations": 2, "num_parents": 2,
                   "seed": 21},
        "output": {"dir": str(root / "run")},
    }
    cfg_p = root / "cfg.json"
    cfg_p.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg_p)]) == 0
    outdir = root / "run"
    assert main(["search", "--config", str(cfg_p), "--checkpoint",
                 str(outdir / "checkpoint.vnck")]) == 0
    best = json.loads((outdir / "best_arch.json").read_text())
    assert main(["eval", "--config", str(cfg_p), "--checkpoint",
                 str(outdir / "checkpoint.vnck"), "--arch", best["key"],
                 "--mode", "all", "--finetune-epochs", "1"]) == 0
    return {"root": root, "cfg": cfg_p, "doc": doc, "outdir": outdir, "best": best}


class TestCliPipeline:
    def test_train_outputs(self, cli_run):
        outdir = cli_run["outdir"]
        for name in ("checkpoint.vnck", "train_log.jsonl", "train_epochs.jsonl",
                     "manifest.json", "train_loss.png"):
            assert (outdir / name).exists(), name

    def test_log_line_count_equals_iterations(self, cli_run):
        lines = (cli_run["outdir"] / "train_log.jsonl").read_text().splitlines()
        # 96 samples / batch 32 = 3 iterations per epoch, 2 epochs
        assert len(lines) == 6
        iters = [json.loads(l)["iter"] for l in lines]
        assert iters == sorted(iters)
        for l in lines:
            parse_arch_key(json.loads(l)["arch"])  # decodable arch hash

    def test_search_outputs_and_reproducibility(self, cli_run):
        outdir, cfg_p = cli_run["outdir"], cli_run["cfg"]
        ledger = (outdir / "ledger.jsonl").read_text()
        gens = [json.loads(l) for l in
                (outdir / "generations.jsonl").read_text().splitlines()]
        assert [g["generation"] for g in gens] == [0, 1, 2]
        assert all(g["best"] >= g["median"] for g in gens)
        so_far = [g["best_so_far"] for g in gens]
        assert so_far == sorted(so_far)
        rerun_dir = cli_run["root"] / "rerun"
        assert main(["search", "--config", str(cfg_p), "--checkpoint",
                     str(outdir / "checkpoint.vnck"), "--out-dir", str(rerun_dir)]) == 0
        assert (rerun_dir / "ledger.jsonl").read_text() == ledger

    def test_random_baseline_matched_budget(self, cli_run):
        outdir, cfg_p = cli_run["outdir"], cli_run["cfg"]
        rand_dir = cli_run["root"] / "rand"
        assert main(["search", "--config", str(cfg_p), "--checkpoint",
                     str(outdir / "checkpoint.vnck"), "--baseline", "random",
                     "--out-dir", str(rand_dir)]) == 0
        n_evo = len((outdir / "ledger.jsonl").read_text().splitlines())
        n_rand = len((rand_dir / "ledger_random.jsonl").read_text().splitlines())
        assert n_evo == n_rand

    def test_best_arch_revalidates(self, cli_run):
        from vitnas.runconfig import load_runconfig
        from vitnas.space import ArchConfig, validate

        cfg = load_runconfig(cli_run["cfg"])
        best = cli_run["best"]
        validate(ArchConfig.from_dict(best["arch"]), cfg.space)
        assert parse_arch_key(best["key"]) == ArchConfig.from_dict(best["arch"])

    def test_eval_report_and_recount(self, cli_run):
        outdir = cli_run["outdir"]
        report = json.loads((outdir / "eval_report.json").read_text())
        assert report["inherited"]["weights_untouched"] is True
        assert report["scratch"]["uses_checkpoint"] is False
        preds = [json.loads(l) for l in
                 (outdir / "eval_predictions.jsonl").read_text().splitlines()]
        for mode in ("inherited", "finetune", "scratch"):
            rows = [p for p in preds if p["mode"] == mode]
            assert rows, mode
            recount = sum(p["pred"] == p["label"] for p in rows) / len(rows)
            assert abs(report[mode]["accuracy"] - recount) < 1e-12
        assert (outdir / "eval_modes.png").exists()

    def test_interrupt_resume_bit_exact(self, cli_run):
        cfg_p, root = cli_run["cfg"], cli_run["root"]
        full_dir, part_dir = root / "full", root / "part"
        assert main(["train", "--config", str(cfg_p), "--out-dir", str(full_dir)]) == 0
        assert main(["train", "--config", str(cfg_p), "--out-dir", str(part_dir),
                     "--stop-after-epoch", "1"]) == 0
        assert main(["train", "--config", str(cfg_p), "--out-dir", str(part_dir),
                     "--resume", str(part_dir / "checkpoint.vnck")]) == 0
        assert (full_dir / "checkpoint.vnck").read_bytes() == \
               (part_dir / "checkpoint.vnck").read_bytes()
        assert (full_dir / "train_log.jsonl").read_text() == \
               (part_dir / "train_log.jsonl").read_text()

    def test_disjoint_checkpoint_larger(self, cli_run):
        cfg_p, root = cli_run["cfg"], cli_run["root"]
        dis_dir = root / "disjoint"
        assert main(["train", "--config", str(cfg_p), "--sharing", "disjoint",
                     "--out-dir", str(dis_dir)]) == 0
        ent_size = (cli_run["outdir"] / "checkpoint.vnck").stat().st_size
        dis_size = (dis_dir / "checkpoint.vnck").stat().st_size
        assert dis_size > ent_size

    def test_spec_mismatch_names_both_digests(self, cli_run, capsys):
        doc = dict(cli_run["doc"])
        doc["space"] = {"preset": "tiny"}
        other_cfg = cli_run["root"] / "other.json"
        other_cfg.write_text(json.dumps(doc))
        code = main(["search", "--config", str(other_cfg), "--checkpoint",
                     str(cli_run["outdir"] / "checkpoint.vnck")])
        assert code == 2
        err = capsys.readouterr().err
        assert "does not match" in err

    def test_geometry_mismatch_rejected(self, cli_run):
        doc = dict(cli_run["doc"])
        doc["data"] = dict(doc["data"], patch=2)  # checkpoint was built for patch 4
        other = cli_run["root"] / "patch2.json"
        other.write_text(json.dumps(doc))
        assert main(["search", "--config", str(other), "--checkpoint",
                     str(cli_run["outdir"] / "checkpoint.vnck")]) == 3

    def test_manifest_written(self, cli_run):
        manifest = json.loads((cli_run["outdir"] / "manifest.json").read_text())
        assert manifest["config"] == cli_run["doc"]
        assert "version" in manifest and "seeds" in manifest


class TestCliErrors:
    def test_missing_dataset_is_data_error(self, tmp_path):
        doc = {"space": {"preset": "tiny"},
               "data": {"train": str(tmp_path / "no.afds"),
                        "val": str(tmp_path / "no.afds"), "patch": 16}}
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(doc))
        assert main(["train", "--config", str(cfg)]) == 3

    def test_bad_config_is_config_error(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"space": {"preset": "nope"}}))
        assert main(["train", "--config", str(cfg)]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort_exit_code(self, tmp_path, monkeypatch):
        train_p, val_p = tmp_path / "t.afds", tmp_path / "v.afds"
        main(["synth", "--out", str(train_p), "--classes", "3", "--samples", "32",
              "--size", "8", "--seed", "0"])
        main(["synth", "--out", str(val_p), "--classes", "3", "--samples", "16",
              "--size", "8", "--seed", "1"])
        doc = {"space": {"embed_dim": [8, 8, 1], "qkv_dim": [4, 4, 1],
                         "mlp_ratio": [1, 1, 1], "num_heads": [1, 1, 1],
                         "depth": [1, 1, 1]},
               "data": {"train": str(train_p), "val": str(val_p), "patch": 4},
               "train": {"epochs": 1, "batch_size": 16, "base_lr": 1e30,
                         "warmup_epochs": 0, "probe_every": 0},
               "output": {"dir": str(tmp_path / "out")}}
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(doc))
        assert main(["train", "--config", str(cfg)]) == 4

    def test_synth_then_cost_and_space(self, tmp_path, capsys):
        assert main(["space", "--preset", "tiny"]) == 0
        out = capsys.readouterr().out
        assert "{192, 216, 240}" in out and "{3.5, 4}" in out
        assert "{3, 4}" in out and "{12, 13, 14}" in out
        assert str(3 * (4**12 + 4**13 + 4**14)) in out
        assert main(["cost", "--preset", "tiny", "--img", "224", "--patch", "16"]) == 0
        out = capsys.readouterr().out
        assert "multiply-accumulates" in out
