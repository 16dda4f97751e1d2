"""End-to-end command-line behavior: exit codes, files, idempotence."""

import json
from pathlib import Path

import numpy as np
import pytest

from deviad.cli import main
from deviad.features import read_feature_file, write_feature_file
from deviad.scoring import read_score_map
from test_features import make_set


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Small world + trained checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = {"channels": 16, "grid_side": 4, "n_normal_images": 30,
            "n_abnormal_images": 12, "n_test_normal": 8, "n_test_abnormal": 6,
            "nuisance_dim": 3, "deviation_dirs": 2, "seed": 3}
    (root / "world.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(root / "world.json"),
                 "--out-dir", str(root / "world")]) == 0

    cfg = {"epochs": 2, "batch_size": 8, "l1": 2, "l2": 1,
           "queries_per_epoch": 16, "seed": 5, "bank_size": 4, "heads": 4,
           "knn": 8, "rank": 2}
    (root / "train.json").write_text(json.dumps(cfg))
    assert main(["train", "--features", str(root / "world/train.idfs"),
                 "--config", str(root / "train.json"),
                 "--out", str(root / "model.idck")]) == 0
    assert main(["manifest", "--features", str(root / "world/train.idfs"),
                 "--l1", "2", "--l2", "1", "--seed", "9",
                 "--setting", "general", "--out", str(root / "m.json")]) == 0
    return root


class TestSynth:
    def test_world_files_written(self, workdir):
        fs = read_feature_file(workdir / "world/train.idfs")
        assert fs.n_images == 42
        assert fs.n_patches == 16
        assert np.load(workdir / "world/directions.npy").shape == (16, 2)

    def test_bad_spec_key_is_config_error(self, workdir, capsys):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"channelz": 6}))
        assert main(["synth", "--spec", str(bad), "--out-dir", str(workdir / "x")]) == 2
        assert "unknown config keys" in capsys.readouterr().err


class TestTrain:
    def test_missing_feature_file_exit_3(self, workdir, capsys):
        code = main(["train", "--features", str(workdir / "nope.idfs"),
                     "--out", str(workdir / "x.idck")])
        assert code == 3
        assert "nope.idfs" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, workdir):
        bad = workdir / "badtrain.json"
        bad.write_text(json.dumps({"epochz": 1}))
        assert main(["train", "--features", str(workdir / "world/train.idfs"),
                     "--config", str(bad), "--out", str(workdir / "x.idck")]) == 2

    def test_seed_repeatability(self, workdir):
        args = ["train", "--features", str(workdir / "world/train.idfs"),
                "--config", str(workdir / "train.json"), "--seed", "21"]
        assert main(args + ["--out", str(workdir / "s1.idck")]) == 0
        assert main(args + ["--out", str(workdir / "s2.idck")]) == 0
        assert (workdir / "s1.idck").read_bytes() == (workdir / "s2.idck").read_bytes()

    def test_trace_written(self, workdir):
        trace = Path(str(workdir / "model.idck") + ".trace.tsv")
        lines = trace.read_text().splitlines()
        assert lines[0].startswith("step\tlr")
        assert len(lines) == 1 + 2 * 2  # header + epochs * steps_per_epoch


class TestScore:
    def run_score(self, workdir, out, extra=()):
        return main(["score", "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--ckpt", str(workdir / "model.idck"),
                     "--ref-features", str(workdir / "world/train.idfs"),
                     "--out", str(workdir / out), *extra])

    def test_scores_all_queries(self, workdir):
        assert self.run_score(workdir, "scores") == 0
        table = (workdir / "scores/scores.tsv").read_text().splitlines()
        assert len(table) == 14  # full test set
        smap = read_score_map(workdir / "scores/0.idsm")
        assert smap.patch_scores.shape == (16,)

    def test_rerun_byte_identical(self, workdir):
        assert self.run_score(workdir, "scores_b") == 0
        for name in sorted(p.name for p in (workdir / "scores").iterdir()):
            assert (workdir / "scores" / name).read_bytes() == \
                (workdir / "scores_b" / name).read_bytes()

    def test_matching_only_needs_no_ckpt(self, workdir):
        code = main(["score", "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--ref-features", str(workdir / "world/train.idfs"),
                     "--matching-only", "--out", str(workdir / "scores_m")])
        assert code == 0

    def test_ablate_suppression_changes_scores(self, workdir):
        assert self.run_score(workdir, "scores_raw", ["--ablate-suppression"]) == 0
        a = (workdir / "scores/scores.tsv").read_text()
        b = (workdir / "scores_raw/scores.tsv").read_text()
        assert a != b

    def test_missing_ckpt_flag_is_config_error(self, workdir):
        code = main(["score", "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--out", str(workdir / "x")])
        assert code == 2


class TestEval:
    def test_eval_report(self, workdir, capsys):
        assert main(["eval", "--scores", str(workdir / "scores"),
                     "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--ref-features", str(workdir / "world/train.idfs"),
                     "--out", str(workdir / "report.json")]) == 0
        out = capsys.readouterr().out
        assert '"image_auroc"' in out
        assert out.strip().endswith(")")  # summary pair line
        doc = json.loads((workdir / "report.json").read_text())
        assert set(doc) == {"image_auroc", "image_ap", "image_f1max",
                            "pixel_auroc", "pixel_pro", "pixel_f1max",
                            "task_difficulty", "n_pos_images", "n_neg_images"}

    def test_perfect_scores_give_unit_metrics(self, workdir, tmp_path, capsys):
        # hand-build score maps equal to the ground truth masks
        from deviad.scoring import ScoreMap, image_score, write_score_map
        fs = read_feature_file(workdir / "world/test.idfs")
        out = tmp_path / "perfect"
        out.mkdir()
        lines = []
        for i in range(fs.n_images):
            patch = fs.patch_masks[i].astype(np.float32)
            smap = ScoreMap(patch_scores=patch,
                            pixel_map=patch.reshape(4, 4),
                            image_score=image_score(patch))
            write_score_map(out / f"{i}.idsm", smap)
            lines.append(f"{i}\t{smap.image_score:.8g}")
        (out / "scores.tsv").write_text("\n".join(lines) + "\n")
        assert main(["eval", "--scores", str(out),
                     "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--ref-features", str(workdir / "world/train.idfs")]) == 0
        doc = json.loads(capsys.readouterr().out.rsplit("}", 1)[0] + "}")
        assert doc["image_auroc"] == 1.0
        assert doc["pixel_auroc"] == 1.0
        assert doc["image_f1max"] == 1.0
        assert doc["pixel_pro"] == 1.0

    GOLDEN_REPORT = (
        '{\n'
        '  "image_auroc": 0.864583,\n'
        '  "image_ap": 0.904762,\n'
        '  "image_f1max": 0.909091,\n'
        '  "pixel_auroc": 0.86315,\n'
        '  "pixel_pro": 0.833333,\n'
        '  "pixel_f1max": 0.909091,\n'
        '  "task_difficulty": 0.159333,\n'
        '  "n_pos_images": 6,\n'
        '  "n_neg_images": 8\n'
        '}\n'
    )

    def test_golden_report_format(self, workdir, tmp_path, capsys):
        # deterministic miniature: mask-correlated scores, one abnormal image
        # left undetected; the golden text was verified against the
        # pair-counting / prefix / double-loop oracles when first produced
        from deviad.scoring import ScoreMap, image_score, write_score_map
        out = tmp_path / "golden"
        out.mkdir()
        fs = read_feature_file(workdir / "world/test.idfs")
        rows = []
        for i in range(fs.n_images):
            patch = np.full(16, 0.2 + 0.05 * (i % 3), dtype=np.float32)
            if i != 9:
                patch[fs.patch_masks[i] == 1] = 0.9
            smap = ScoreMap(patch_scores=patch, pixel_map=patch.reshape(4, 4),
                            image_score=image_score(patch))
            write_score_map(out / f"{i}.idsm", smap)
            rows.append(f"{i}\t{smap.image_score:.8g}")
        (out / "scores.tsv").write_text("\n".join(rows) + "\n")
        assert main(["eval", "--scores", str(out),
                     "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--ref-features", str(workdir / "world/train.idfs"),
                     "--out", str(tmp_path / "report.json")]) == 0
        assert (tmp_path / "report.json").read_text() == self.GOLDEN_REPORT
        assert capsys.readouterr().out.splitlines()[-1] == "(86.5 / 86.3)"


class TestHardSetting:
    def test_hard_scoring_excludes_reference_type(self, workdir):
        assert main(["manifest", "--features", str(workdir / "world/train.idfs"),
                     "--l1", "2", "--l2", "1", "--seed", "9", "--setting", "hard",
                     "--out", str(workdir / "mh.json")]) == 0
        assert main(["score", "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "mh.json"),
                     "--ckpt", str(workdir / "model.idck"),
                     "--ref-features", str(workdir / "world/train.idfs"),
                     "--out", str(workdir / "scores_h")]) == 0
        manifest = json.loads((workdir / "mh.json").read_text())
        fs = read_feature_file(workdir / "world/test.idfs")
        scored = [int(l.split("\t")[0]) for l in
                  (workdir / "scores_h/scores.tsv").read_text().splitlines()]
        excluded = [i for i in range(fs.n_images)
                    if fs.image_labels[i] == 1
                    and fs.anomaly_types[i] == manifest["anomaly_type"]]
        assert excluded
        assert not set(scored) & set(excluded)
        assert len(scored) == fs.n_images - len(excluded)


class TestHelp:
    def test_every_subcommand_lists_flags_with_defaults(self, capsys):
        from deviad.cli import build_parser
        parser = build_parser()
        for command, flags in {
            "train": ["--features", "--config", "--out", "--seed", "--trace"],
            "score": ["--manifest", "--ckpt", "--ablate-suppression", "--matching-only",
                      "--deviation-matching", "--upsample", "--map-height"],
            "eval": ["--scores", "--setting"],
            "manifest": ["--l1", "--l2", "--allow-equal-shots"],
            "synth": ["--spec", "--out-dir"],
            "export-deviations": ["--ckpt", "--out"],
        }.items():
            with pytest.raises(SystemExit):
                parser.parse_args([command, "--help"])
            text = capsys.readouterr().out
            for flag in flags:
                assert flag in text, f"{command} help missing {flag}"
            assert "default" in text


class TestExportDeviations:
    def test_export_shapes_and_projection_block(self, workdir):
        out = workdir / "dev.npy"
        assert main(["export-deviations",
                     "--features", str(workdir / "world/test.idfs"),
                     "--manifest", str(workdir / "m.json"),
                     "--ckpt", str(workdir / "model.idck"),
                     "--ref-features", str(workdir / "world/train.idfs"),
                     "--out", str(out)]) == 0
        matrix = np.load(out)
        fs = read_feature_file(workdir / "world/test.idfs")
        assert matrix.shape == (fs.n_images * 16, 3 * 16)
        ids = Path(str(out) + ".ids.tsv").read_text().splitlines()
        assert len(ids) == matrix.shape[0]

    def test_projected_block_zero_for_orthogonal_patch(self, workdir, tmp_path):
        # craft a query whose deviations are orthogonal to every bank row
        from deviad.encoder import load_checkpoint
        ckpt = load_checkpoint(workdir / "model.idck")
        matrix = np.load(workdir / "dev.npy")
        c = 16
        denoised = matrix[:, c:2 * c]
        projected = matrix[:, 2 * c:]
        # rows with zero denoised deviation must project to zero
        zero_rows = np.linalg.norm(denoised, axis=1) < 1e-12
        if zero_rows.any():
            assert np.allclose(projected[zero_rows], 0.0)
