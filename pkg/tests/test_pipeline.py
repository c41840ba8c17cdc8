import numpy as np
import pytest

from hsg import checkpoint as ckpt_io
from hsg import cli, gradcheck, pipeline, synth
from hsg import oversegment as ovs
from hsg import tensor as tn
from hsg.config import RunConfig
from hsg.netpbm import read_pgm, read_ppm, to_unit, write_ppm

TINY = {"m": "16", "view_size": "16", "anchors": "32", "batch_size": "2", "views": "2",
        "epochs": "2"}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synth.write_corpus(root, synth.SceneSpec(), n_train=6, n_eval=3)


@pytest.fixture(scope="module")
def cfg(corpus):
    return RunConfig(corpus=str(corpus)).updated(TINY)


@pytest.fixture(scope="module")
def data(cfg):
    return pipeline.TrainData.from_corpus(cfg.corpus, cfg)


class TestTraining:
    def test_learning_rate_schedule(self):
        cfg = RunConfig(lr=1.0, lr_decay=0.1)
        rates = [pipeline.learning_rate(cfg, s, 100) for s in (1, 32, 33, 56, 57, 75, 76, 100)]
        np.testing.assert_allclose(rates, [1, 1, 0.1, 0.1, 0.01, 0.01, 0.001, 0.001])

    def test_same_seed_same_log(self, cfg, data):
        a = pipeline.train(cfg.updated({"max_steps": "3"}), data=data)
        b = pipeline.train(cfg.updated({"max_steps": "3"}), data=data)
        assert [r.row() for r in a.log] == [r.row() for r in b.log]
        assert len(a.log) == 3

    def test_edge_only_objective(self, cfg, data):
        edge = cfg.updated({"lambda_f": "0", "lambda_g": "0"})
        model = pipeline.Model.init(edge)
        total, (le, ll, lg, lt) = pipeline.forward_losses(model, edge, data, 1)
        assert lt == le

    def test_outputs_written(self, cfg, data, tmp_path):
        pipeline.train(cfg.updated({"max_steps": "2"}), data=data, out_dir=tmp_path)
        rows = pipeline.read_loss_log(tmp_path / "loss_log.csv")
        assert [r[0] for r in rows] == [1, 2]
        assert (tmp_path / "loss_log.csv").read_text().splitlines()[0] == \
            "step,loss_edge,loss_levels,loss_goodness,total"
        ck = ckpt_io.load(tmp_path / "checkpoint.hsg")
        assert ck.step == 2 and ck.config["m"] == 16

    def test_resume_log_appends(self, cfg, data, tmp_path):
        first = pipeline.train(cfg.updated({"max_steps": "1"}), data=data, out_dir=tmp_path)
        pipeline.train(cfg.updated({"max_steps": "2"}), resume=first.checkpoint(), data=data,
                       out_dir=tmp_path)
        assert [r[0] for r in pipeline.read_loss_log(tmp_path / "loss_log.csv")] == [1, 2]

    def test_failing_steps_abort_run(self, cfg, data, monkeypatch):
        calls = []

        def broken(*args):
            calls.append(1)
            raise ArithmeticError("boom")

        monkeypatch.setattr(pipeline, "train_step", broken)
        with pytest.raises(RuntimeError):
            pipeline.train(cfg, data=data)
        assert len(calls) == pipeline.MAX_CONSECUTIVE_ABORTS + 1

    def test_single_failed_step_is_skipped(self, cfg, data, monkeypatch):
        real = pipeline.train_step

        def flaky(model, c, d, step, total):
            if step == 2:
                raise ValueError("bad step")
            return real(model, c, d, step, total)

        monkeypatch.setattr(pipeline, "train_step", flaky)
        res = pipeline.train(cfg.updated({"max_steps": "3"}), data=data)
        assert [r.step for r in res.log] == [1, 3]


class TestSegmentAndEval:
    def test_constant_image(self, cfg):
        seg = pipeline.segment_image(pipeline.Model.init(cfg), cfg, np.full((32, 32, 3), 0.5))
        assert len(seg.levels) == 3
        assert seg.levels[2].max() + 1 <= 4

    def test_merges_and_repeatability(self, cfg, corpus):
        model = pipeline.Model.init(cfg)
        for s in synth.load_split(corpus, "eval"):
            a = pipeline.segment_image(model, cfg, to_unit(s.image))
            b = pipeline.segment_image(model, cfg, to_unit(s.image))
            for x, y in zip(a.levels, b.levels):
                np.testing.assert_array_equal(x, y)
            assert ovs.is_refinement(a.levels[0], a.levels[1])
            assert ovs.is_refinement(a.levels[1], a.levels[2])

    def test_report_fields(self, cfg, tmp_path):
        report = pipeline.evaluate(pipeline.Model.init(cfg), cfg)
        assert [k for k in report if k.startswith("nfcovering")] == [
            "nfcovering_level0", "nfcovering_level1", "nfcovering_level2"]
        pipeline.write_report(tmp_path / "r.txt", report)
        back = pipeline.read_report(tmp_path / "r.txt")
        assert back["miou"] == report["miou"]

    def test_self_retrieval(self, cfg):
        report = pipeline.evaluate(pipeline.Model.init(cfg), cfg, split="train", bank_split="train", k=1)
        assert report["miou"] > report["baseline_miou"]


class TestGradcheck:
    def test_all_components_pass(self):
        checks = gradcheck.run_gradcheck(seed=0)
        assert [c.name for c in checks] == ["contrastive", "goodness", "transformer_level", "encoder"]
        for c in checks:
            assert c.report.passed, c.line()
            assert "max_rel=" in c.line()

    def test_corrupted_rule_fails(self, monkeypatch):
        real = tn.exp

        def bad_exp(a):
            out = real(a)
            return tn._node(out.data, out.parents, lambda g: (1.1 * g * out.data,), "exp")

        monkeypatch.setattr(tn, "exp", bad_exp)
        rng = np.random.default_rng(0)

        def f(x):
            return tn.exp(x).sum()

        assert not tn.grad_check(f, rng.normal(size=4)).passed


class TestCli:
    def test_usage_errors(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE
        assert cli.main(["train"]) == cli.EXIT_USAGE
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE

    def test_unknown_override(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path), "--no-such-key", "3"]) == cli.EXIT_USAGE

    def test_runtime_failure(self, tmp_path):
        code = cli.main(["segment", str(tmp_path / "missing.ppm"), "--checkpoint",
                         str(tmp_path / "missing.hsg"), "--out", str(tmp_path)])
        assert code == cli.EXIT_RUNTIME

    def test_end_to_end(self, tmp_path, capsys):
        root = tmp_path / "corpus"
        assert cli.main(["synth", "--out", str(root), "--n-train", "4", "--n-eval", "2"]) == 0
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("".join(f"{k}={v}\n" for k, v in TINY.items()) + f"corpus={root}\n")
        run = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_path), "--seed", "1", "--max-steps", "2",
                         "--out", str(run)]) == 0
        ck = run / "checkpoint.hsg"
        assert ckpt_io.load(ck).config["seed"] == 1
        seg_dir = tmp_path / "seg"
        assert cli.main(["segment", str(root / "eval" / "img_00000.ppm"), "--checkpoint", str(ck),
                         "--out", str(seg_dir), "--composite"]) == 0
        maps = [read_pgm(seg_dir / f"img_00000_G{lv}.pgm") for lv in range(3)]
        assert ovs.is_refinement(maps[0], maps[1]) and ovs.is_refinement(maps[1], maps[2])
        assert read_ppm(seg_dir / "img_00000_levels.ppm").shape == (64, 64 * 3 + 4, 3)
        report = tmp_path / "report.txt"
        assert cli.main(["eval", "--checkpoint", str(ck), "--out", str(report)]) == 0
        assert "nfcovering_level2" in pipeline.read_report(report)

    def test_gradcheck_command(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 4

    def test_incompatible_checkpoint(self, tmp_path, corpus):
        (tmp_path / "bad.hsg").write_bytes(b"garbage!" * 4)
        img = tmp_path / "x.ppm"
        write_ppm(img, synth.load_sample(corpus, "eval", 0).image)
        assert cli.main(["segment", str(img), "--checkpoint", str(tmp_path / "bad.hsg"),
                         "--out", str(tmp_path)]) == cli.EXIT_RUNTIME
