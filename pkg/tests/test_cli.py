"""
Tests for the command line interface.

These tests cover argument parsing, configuration merging and the mapping
of failures onto exit codes.
"""

import pytest

from mifcn import cli
from mifcn.checkpoint import save_checkpoint
from mifcn.cli import create_parser, load_run_config, main
from mifcn.dataset import PatchTuple, save_archive
from mifcn.errors import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, TrainingDiverged, UsageError
from mifcn.gradcheck import GradcheckConfig, GradcheckReport
from mifcn.model import ModelConfig, identity_init
from mifcn.training import LOG_FINAL, LOG_HEADER


@pytest.fixture
def trained_inputs(temp_dir, rng):
    """A valid T=2 archive written without the command line."""
    tuples = [
        PatchTuple(rng.uniform(0, 255, size=(2, 5, 5)), rng.uniform(0, 255, size=(2, 5, 5)), [(0, 0), (1, 1)])
        for _ in range(3)
    ]
    return save_archive(tuples, temp_dir / "p.msgpack"), temp_dir / "m.msgpack"


class TestParser:
    """Test the argument parser."""

    def test_commands(self):
        """Test that every command parses with its flags."""
        parser = create_parser()
        args = parser.parse_args(["ablate-h", "--checkpoint", "m.msgpack", "--data", "test", "--h-grid", "1", "400"])
        assert args.command == "ablate-h"
        assert args.h_grid == [1.0, 400.0]

        args = parser.parse_args(["denoise", "--emit-branches", "--h", "250"])
        assert args.emit_branches
        assert args.h == 250.0

    def test_unknown_flag_is_usage_error(self):
        """Test that parser errors raise instead of exiting."""
        with pytest.raises(UsageError):
            create_parser().parse_args(["train", "--learning-rate", "1"])

    def test_commands_table(self):
        """Test that every subcommand has a handler."""
        parser = create_parser()
        subparsers = next(a for a in parser._actions if a.dest == "command")
        assert set(subparsers.choices) == set(cli.COMMANDS)


class TestRunConfig:
    """Test merging of defaults, files and flags."""

    def test_flags_override_defaults(self):
        """Test that set flags win and unset flags keep the default."""
        args = create_parser().parse_args(["train", "--T", "3", "--epochs", "5"])
        cfg = load_run_config(args)
        assert cfg.model.T == 3
        assert cfg.model.C == 24
        assert cfg.training.epochs == 5
        assert cfg.training.batch == 64

    def test_A_drops_configured_dilations(self, temp_dir):
        """Test that a new A discards a dilation list of another length."""
        path = temp_dir / "dil.yaml"
        path.write_text("model:\n  dilations: [1, 2, 1]\n")
        args = create_parser().parse_args(["train", "--config", str(path), "--A", "2"])
        cfg = load_run_config(args)
        assert cfg.model.A == 2
        assert cfg.model.dilations is None

    def test_invalid_flag_value(self):
        """Test that merged values are validated."""
        args = create_parser().parse_args(["train", "--h", "-5"])
        with pytest.raises(UsageError, match="model.h"):
            load_run_config(args)


class TestExitCodes:
    """Test the exit code of each failure class."""

    def test_no_command(self):
        """Test that help is printed with success."""
        assert main([]) == EXIT_OK

    def test_unknown_flag(self):
        """Test exit 1 on a bad flag."""
        assert main(["evaluate", "--bogus"]) == EXIT_USAGE

    def test_missing_required_flag(self):
        """Test exit 1 when a required path flag is absent."""
        assert main(["denoise", "--data", "."]) == EXIT_USAGE

    def test_missing_data(self, temp_dir):
        """Test exit 2 for a missing input directory."""
        assert main(["build-dataset", "--data", str(temp_dir / "absent")]) == EXIT_DATA

    def test_missing_archive(self, temp_dir):
        """Test exit 2 for a missing archive."""
        code = main(["train", "--data", str(temp_dir / "none.msgpack"), "--checkpoint", str(temp_dir / "m.msgpack")])
        assert code == EXIT_DATA

    def test_roi_metrics_need_rois(self, temp_dir):
        """Test exit 1 when ROI metrics are requested without ROIs."""
        assert main(["evaluate", "--data", str(temp_dir), "--results", str(temp_dir), "--metrics", "cnr"]) == EXIT_USAGE

    def test_unknown_metric(self, temp_dir):
        """Test exit 1 for a metric name that does not exist."""
        assert main(["evaluate", "--data", str(temp_dir), "--results", str(temp_dir), "--metrics", "ssim"]) == EXIT_USAGE

    def test_nonpositive_grid(self, temp_dir):
        """Test exit 1 for a zero fusion constant."""
        assert main(["ablate-h", "--h-grid", "0", "100"]) == EXIT_USAGE

    def test_too_many_nearby_images(self, test_cases_dir, temp_dir):
        """Test exit 2 when a case holds more nearby images than the model takes."""
        config = ModelConfig(T=3, C=2, A=1, B=0)
        checkpoint = save_checkpoint(identity_init(config, seed=0), config, temp_dir / "t3.msgpack")
        code = main(["denoise", "--checkpoint", str(checkpoint), "--data", str(test_cases_dir),
                     "--out", str(temp_dir / "out")])
        assert code == EXIT_DATA
        assert not (temp_dir / "out").exists()

    def test_divergence(self, trained_inputs, mocker):
        """Test exit 3 when training diverges."""
        archive, checkpoint = trained_inputs
        mocker.patch("mifcn.cli.train", side_effect=TrainingDiverged("loss became nan; last finite epoch: 1"))
        code = main(["train", "--data", str(archive), "--checkpoint", str(checkpoint), "--T", "2", "--C", "2",
                     "--A", "1", "--B", "0"])
        assert code == EXIT_NUMERIC


class TestGradcheckCommand:
    """Test the gradcheck command."""

    @pytest.mark.slow
    def test_passes(self):
        """Test a small real run."""
        assert main(["gradcheck", "--instances", "1", "--conv-cases", "5"]) == EXIT_OK

    def test_failure_exits_numeric(self, mocker):
        """Test exit 3 when a sweep fails."""
        report = GradcheckReport(
            config=GradcheckConfig(),
            conv_max_error=0.0,
            conv_cases=1,
            group_errors={"loss:head.output.bias": 0.5},
            fusion_failures=[],
        )
        run = mocker.patch("mifcn.cli.run_gradcheck", return_value=report)
        assert main(["gradcheck", "--seed", "7", "--instances", "3"]) == EXIT_NUMERIC
        cfg = run.call_args.args[0]
        assert cfg.seed == 7 and cfg.instances == 3

    def test_config_section_and_flags(self, temp_dir, mocker):
        """Test that the gradcheck section of --config is read and flags win over it."""
        path = temp_dir / "check.yaml"
        path.write_text("gradcheck:\n  instances: 2\n  conv_cases: 4\n  coords_per_tensor: 3\n")
        report = GradcheckReport(config=GradcheckConfig())
        run = mocker.patch("mifcn.cli.run_gradcheck", return_value=report)

        assert main(["gradcheck", "--config", str(path), "--conv-cases", "9"]) == EXIT_OK
        cfg = run.call_args.args[0]
        assert (cfg.instances, cfg.conv_cases, cfg.coords_per_tensor) == (2, 9, 3)

        assert main(["gradcheck", "--config", str(path), "--all-coordinates"]) == EXIT_OK
        assert run.call_args.args[0].coords_per_tensor is None


class TestTrainCommand:
    """Test the train command's handling of its outputs."""

    def test_existing_log_needs_force(self, trained_inputs):
        """Test that an existing epoch log is kept unless --force is given."""
        archive, checkpoint = trained_inputs
        log = checkpoint.with_suffix(".log")
        log.write_text("earlier run\n")
        argv = ["train", "--data", str(archive), "--checkpoint", str(checkpoint), "--T", "2", "--C", "2",
                "--A", "1", "--B", "0", "--epochs", "1"]

        assert main(argv) == EXIT_USAGE
        assert log.read_text() == "earlier run\n"
        assert not checkpoint.exists()

        assert main(argv + ["--force"]) == EXIT_OK
        lines = log.read_text().splitlines()
        assert lines[0] == LOG_HEADER
        assert lines[-1].startswith(LOG_FINAL)


class TestDenoiseCommand:
    """Test the denoise command's configuration."""

    @pytest.fixture
    def checkpoint(self, temp_dir):
        config = ModelConfig(T=4, C=2, A=1, B=0)
        return save_checkpoint(identity_init(config, seed=0), config, temp_dir / "t4.msgpack")

    def test_config_sets_fusion_constant(self, checkpoint, test_cases_dir, temp_dir, mocker):
        """Test that inference.h from --config reaches the model and --h overrides it."""
        path = temp_dir / "inference.yaml"
        path.write_text("inference:\n  h: 50\n")
        spy = mocker.spy(cli, "denoise_case")
        out = temp_dir / "out"

        assert main(["denoise", "--config", str(path), "--checkpoint", str(checkpoint),
                     "--data", str(test_cases_dir), "--out", str(out)]) == EXIT_OK
        assert {c.args[3] for c in spy.call_args_list} == {50.0}

        spy.reset_mock()
        assert main(["denoise", "--config", str(path), "--checkpoint", str(checkpoint),
                     "--data", str(test_cases_dir), "--out", str(out), "--h", "200"]) == EXIT_OK
        assert {c.args[3] for c in spy.call_args_list} == {200.0}

    def test_checkpoint_fusion_constant_by_default(self, checkpoint, test_cases_dir, temp_dir, mocker):
        """Test that without --config or --h the checkpoint's constant is used."""
        spy = mocker.spy(cli, "denoise_case")
        assert main(["denoise", "--checkpoint", str(checkpoint), "--data", str(test_cases_dir),
                     "--out", str(temp_dir / "out")]) == EXIT_OK
        assert {c.args[3] for c in spy.call_args_list} == {None}

    def test_invalid_configured_constant(self, checkpoint, test_cases_dir, temp_dir):
        """Test exit 1 for a non-positive inference.h."""
        path = temp_dir / "bad.yaml"
        path.write_text("inference:\n  h: -1\n")
        assert main(["denoise", "--config", str(path), "--checkpoint", str(checkpoint),
                     "--data", str(test_cases_dir), "--out", str(temp_dir / "out")]) == EXIT_USAGE
