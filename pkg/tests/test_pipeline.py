import contextlib
import io
import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import main
import pipeline
from errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, NoPathError
from event_log import configure_logging
from run_config import load_run_config
from schemas import RunConfig

VOCAB = ["go", "to", "we", "sun", "red", "cat"]


class CommandLineTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tmp = Path(tempfile.mkdtemp())
        vocab = cls.tmp / "vocab.txt"
        vocab.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
        cls.workspace = cls.tmp / "exp"
        cls.base_args = [
            "--output-dir", str(cls.workspace),
            "--set", 'corpus.accents=["US", "UK"]',
            "--set", 'corpus.extra_test_accents=["ESP"]',
            "--set", f"corpus.vocab_path='{vocab}'",
            "--set", "corpus.utterances_per_accent=6",
            "--set", "corpus.eval_utterances_per_accent=2",
            "--set", "corpus.words_per_utt_mean=2.0",
            "--set", "corpus.max_words_per_utt=3",
            "--set", "corpus.feature_dim=4",
            "--set", "am.iterations_per_level=2",
            "--set", "am.components=1",
            "--set", "am.density_sweep=[1]",
            "--set", "decoder.beam=60.0",
            "--set", "decision.min_count=1",
            "--set", "threads=1",
        ]
        cls.run_all_code = cls._main("run-all")

    @classmethod
    def tearDownClass(cls) -> None:
        configure_logging(None)
        shutil.rmtree(cls.tmp, ignore_errors=True)

    @classmethod
    def _main(cls, *args: str) -> int:
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            return main.main([*cls.base_args, *args])

    def test_run_all_writes_comparison_for_both_methods(self) -> None:
        self.assertEqual(self.run_all_code, EXIT_OK)
        comparison = json.loads((self.workspace / "reports" / "comparison.json").read_text(encoding="utf-8"))
        self.assertEqual(sorted(comparison["methods"]), ["mono", "multi"])
        self.assertEqual(comparison["accents"], ["US", "UK"])
        self.assertEqual(len(comparison["density_sweep"]), 2)
        for name in ("comparison.txt", "confusion_mono.txt", "word_accent_multi.txt", "decisions_multi.tsv"):
            self.assertTrue((self.workspace / "reports" / name).exists(), name)
        self.assertTrue((self.workspace / "am" / "model.json").exists())
        self.assertTrue((self.workspace / "logs" / "run.jsonl").exists())

    def test_decode_output_covers_evaluation_split(self) -> None:
        lines = (self.workspace / "decode" / "multi.jsonl").read_text(encoding="utf-8").splitlines()
        # two per training accent plus two ESP utterances
        self.assertEqual(len(lines), 6)
        record = json.loads(lines[0])
        self.assertEqual(record["method"], "multi")
        self.assertEqual(record["phones"][0]["start"], 0)

    def test_existing_outputs_need_force(self) -> None:
        self.assertEqual(self._main("prep-lexicon"), EXIT_VALIDATION)
        self.assertEqual(self._main("--force", "prep-lexicon"), EXIT_OK)

    def test_multi_lm_has_no_cross_accent_ngrams(self) -> None:
        buffer = io.StringIO()
        with contextlib.redirect_stdout(buffer), contextlib.redirect_stderr(io.StringIO()):
            code = main.main([*self.base_args, "--force", "audit-lm"])
        self.assertEqual(code, EXIT_OK)
        self.assertIn("cross-accent n-grams: 0", buffer.getvalue())

    def test_stats_command(self) -> None:
        self.assertEqual(self._main("--force", "stats"), EXIT_OK)
        report = json.loads((self.workspace / "reports" / "corpus_stats.json").read_text(encoding="utf-8"))
        self.assertEqual(report["splits"]["train"]["utterances"], 12)

    def test_mono_audit_is_a_validation_error(self) -> None:
        arpa = self.workspace / "lm" / "mono.arpa"
        self.assertEqual(self._main("--force", "audit-lm", "--arpa", str(arpa)), EXIT_VALIDATION)

    def test_runtime_failure_exit_code(self) -> None:
        with patch.object(pipeline, "run_decode", side_effect=NoPathError("test-us-00000", 5, 0, 1.0)):
            self.assertEqual(self._main("--force", "decode", "--method", "mono"), EXIT_RUNTIME)

    def test_bad_override_exit_code(self) -> None:
        self.assertEqual(self._main("--set", "am.components=3", "stats"), EXIT_VALIDATION)

    def test_usage_errors_exit_with_one(self) -> None:
        for args in (["bogus"], ["decode"], ["decode", "--method", "poly"]):
            with self.assertRaises(SystemExit) as ctx, contextlib.redirect_stderr(io.StringIO()):
                main.main(args)
            self.assertEqual(ctx.exception.code, EXIT_USAGE)



class ExperimentTests(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = Path(tempfile.mkdtemp())
        self.vocab = self.tmp / "vocab.txt"
        self.vocab.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")

    def tearDown(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _config(self, name: str, *overrides: str) -> RunConfig:
        return load_run_config(
            None,
            [
                f"output_dir='{self.tmp / name}'",
                'corpus.accents=["US", "UK"]',
                "corpus.extra_test_accents=[]",
                f"corpus.vocab_path='{self.vocab}'",
                "corpus.utterances_per_accent=20",
                "corpus.eval_utterances_per_accent=10",
                "corpus.words_per_utt_mean=2.5",
                "corpus.max_words_per_utt=4",
                "corpus.feature_dim=4",
                "am.iterations_per_level=2",
                "am.components=1",
                "am.density_sweep=[1]",
                "decoder.beam=60.0",
                "decision.min_count=1",
                "threads=1",
                *overrides,
            ],
        )

    def test_accent_shift_moves_accuracy_from_chance_to_near_perfect(self) -> None:
        rows = pipeline.sweep_shift(self._config("shift", "corpus.shift_sweep=[0.0, 12.0]"))
        self.assertEqual(len(rows), 4)
        for row in rows:
            with self.subTest(shift=row.accent_shift, method=row.method):
                if row.accent_shift == 0.0:
                    self.assertLess(row.oracle_frame_accuracy, 0.8)
                    # twenty utterances over two accents, chance is 50 %
                    self.assertLessEqual(row.acc, 80.0)
                else:
                    self.assertGreater(row.oracle_frame_accuracy, 0.95)
                    self.assertGreaterEqual(row.acc, 90.0)
        self.assertTrue((self.tmp / "shift" / "reports" / "shift_sweep.txt").exists())

    def test_multi_accuracy_keeps_up_with_mono_across_seeds(self) -> None:
        accuracy: dict[str, list[float]] = {"mono": [], "multi": []}
        for seed in range(5):
            config = self._config(f"seed{seed}", f"seed={seed}", "corpus.shift_sweep=[2.0]")
            for row in pipeline.sweep_shift(config):
                accuracy[row.method].append(row.acc)
        self.assertEqual([len(v) for v in accuracy.values()], [5, 5])
        mono, multi = (sum(accuracy[m]) / 5 for m in ("mono", "multi"))
        # one utterance of twenty is five points
        self.assertGreaterEqual(multi, mono - 5.0, accuracy)

    def test_density_sweep_reuses_the_main_model(self) -> None:
        config = self._config("density", "am.density_sweep=[1, 2, 4]")
        with patch.object(pipeline, "train_am", wraps=pipeline.train_am) as spy:
            comparison = pipeline.run_all(config)
        trained = [call.args[1] if len(call.args) > 1 else None for call in spy.call_args_list]
        self.assertEqual(trained, [None, 2, 4])
        rows = comparison.density_sweep
        self.assertEqual([(r.components_per_state, r.method) for r in rows], [(c, m) for c in (1, 2, 4) for m in ("mono", "multi")])
        densities = [r.total_densities for r in rows if r.method == "mono"]
        self.assertEqual(densities, sorted(set(densities)))
        am_dir = self.tmp / "density" / "am"
        self.assertFalse((am_dir / "model_c1.json").exists())
        self.assertTrue((am_dir / "model_c4.json").exists())


if __name__ == "__main__":
    unittest.main()
