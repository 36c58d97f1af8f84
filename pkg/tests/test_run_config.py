import tempfile
import unittest
from pathlib import Path

from errors import ConfigError
from run_config import apply_overrides, load_run_config, parse_override
from schemas import RunConfig


class OverrideTests(unittest.TestCase):
    def test_values_parse_as_toml(self) -> None:
        self.assertEqual(parse_override("am.components=4"), (["am", "components"], 4))
        self.assertEqual(parse_override("corpus.shift_sweep=[0.0, 3.0]"), (["corpus", "shift_sweep"], [0.0, 3.0]))
        self.assertEqual(parse_override('decoder.split="dev"'), (["decoder", "split"], "dev"))

    def test_bare_words_stay_strings(self) -> None:
        self.assertEqual(parse_override("decision.granularity=phone"), (["decision", "granularity"], "phone"))

    def test_missing_equals_sign(self) -> None:
        with self.assertRaises(ConfigError):
            parse_override("am.components")

    def test_nested_assignment_does_not_mutate_input(self) -> None:
        base = {"am": {"components": 2}}
        updated = apply_overrides(base, ["am.components=8", "seed=5"])
        self.assertEqual(updated, {"am": {"components": 8}, "seed": 5})
        self.assertEqual(base, {"am": {"components": 2}})


class LoadTests(unittest.TestCase):
    def test_defaults_match_model_defaults(self) -> None:
        self.assertEqual(load_run_config().model_dump(), RunConfig().model_dump())

    def test_file_merges_over_defaults(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.toml"
            path.write_text('seed = 9\n[decoder]\nbeam = 20.0\n', encoding="utf-8")
            config = load_run_config(path, ["decoder.max_active=50"])
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.decoder.beam, 20.0)
        self.assertEqual(config.decoder.max_active, 50)
        self.assertEqual(config.decoder.lm_scale, 10.0)

    def test_invalid_values_name_the_field(self) -> None:
        with self.assertRaises(ConfigError) as ctx:
            load_run_config(overrides=["am.components=3"])
        self.assertIn("am.components", str(ctx.exception))

    def test_unknown_field_is_rejected(self) -> None:
        with self.assertRaises(ConfigError):
            load_run_config(overrides=["decoder.bean=3.0"])

    def test_empty_sweep_is_rejected(self) -> None:
        with self.assertRaises(ConfigError):
            load_run_config(overrides=["am.density_sweep=[]"])

    def test_missing_paths(self) -> None:
        with self.assertRaises(ConfigError):
            load_run_config("/nonexistent/run.toml")
        with self.assertRaises(ConfigError):
            load_run_config(overrides=["corpus.path='/nonexistent/corpus'"])

    def test_malformed_toml(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.toml"
            path.write_text("seed = = 1\n", encoding="utf-8")
            with self.assertRaises(ConfigError):
                load_run_config(path)


if __name__ == "__main__":
    unittest.main()
