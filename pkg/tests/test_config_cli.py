import json
import os

import pytest

from cascade_draft.cli import main
from cascade_draft.config import ConfigError, RunConfig
from cascade_draft.engine import recount_tau

TOY = """\
# tiny end-to-end run
seed = 5
model.vocab_size = 32
model.hidden_dim = 16
model.num_layers = 3
model.num_heads = 2
model.max_positions = 96
drafter.depth = 3
drafter.hidden_dim = 16
drafter.num_heads = 2
pretrain.steps = 20
pretrain.batch_size = 4
pretrain.seq_len = 17
data.n_examples = 6
data.n_prompts = 6
data.prompt_len = 4
data.continuation_len = 8
train.steps = 4
train.batch_size = 2
train.lr = 0.001
gen.max_new_tokens = 12
gen.draft_depth = 3
gen.topk = 3
eval.n_prompts = 3
eval.prompt_len = 4
lossless.n_prompts = 3
lossless.max_new_tokens = 12
lossless.mc_trials = 50000
"""


def write_config(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    paths = (f"paths.target = {tmp_path / 't.fegl'}\npaths.drafter = {tmp_path / 'd.fegl'}\n"
             f"paths.data = {tmp_path / 'train.fegd'}\npaths.out_dir = {tmp_path}\n")
    path.write_text(TOY + paths + extra, encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert main(["init-target", "--config", cfg]) == 0
    assert main(["train-drafter", "--config", cfg]) == 0
    return tmp, cfg


class TestRunConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.parse(cfg.dump()) == cfg

    def test_toy_round_trip(self):
        cfg = RunConfig.parse(TOY)
        assert cfg.seed == 5 and cfg.model.vocab_size == 32 and cfg.train.lr == 0.001
        assert RunConfig.parse(cfg.dump()) == cfg

    def test_types(self):
        cfg = RunConfig.parse("model.tap_low = none\ndrafter.attend_context = false\ntrain.adam_betas = 0.8, 0.9")
        assert cfg.model.tap_low is None and cfg.drafter.attend_context is False
        assert cfg.train.adam_betas == (0.8, 0.9)

    @pytest.mark.parametrize("text", ["model.hidden_size = 3", "modle.hidden_dim = 3", "seed", "train.lr = fast",
                                      "drafter.attend_context = maybe"])
    def test_rejections(self, text):
        with pytest.raises(ConfigError):
            RunConfig.parse(text)

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("model.num_layers = 2")
        with pytest.raises(ConfigError):
            RunConfig.parse("train.grad_clip = 0")

    def test_overrides(self):
        cfg = RunConfig.parse(TOY, {"gen.topk": 1, "seed": 9})
        assert cfg.gen.topk == 1 and cfg.seed == 9

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("drafter.hidden_dim = 32").check_compatible()


class TestCommands:
    def test_init_target_deterministic(self, tmp_path):
        cfg = write_config(tmp_path, "pretrain.steps = 0\n")
        assert main(["init-target", "--config", cfg, "--out", str(tmp_path / "a.fegl")]) == 0
        assert main(["init-target", "--config", cfg, "--out", str(tmp_path / "b.fegl")]) == 0
        assert (tmp_path / "a.fegl").read_bytes() == (tmp_path / "b.fegl").read_bytes()

    def test_init_target_rejects_two_layers(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "model.num_layers = 2\n")
        assert main(["init-target", "--config", cfg]) != 0
        assert "num_layers" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        cfg = write_config(tmp_path, "pretrain.steps = 0\n")
        assert main(["init-target", "--config", cfg, "--out", str(tmp_path / "no" / "dir" / "t.fegl")]) != 0

    def test_pretraining_lowers_ce(self, trained, capsys):
        tmp, cfg = trained
        assert main(["init-target", "--config", cfg, "--out", str(tmp / "again.fegl")]) == 0
        line = capsys.readouterr().out.splitlines()[0]
        before, after = (float(x) for x in line.split()[2::2])
        assert after < before
        assert (tmp / "again.fegl").read_bytes() == (tmp / "t.fegl").read_bytes()

    def test_train_outputs(self, trained):
        tmp, _ = trained
        rows = (tmp / "d.loss.csv").read_text().splitlines()
        assert len(rows) == 1 + 4
        assert (tmp / "train.fegd").read_bytes()[:4] == b"FEGD"
        assert (tmp / "d.fegl").read_bytes()[:4] == b"FEGL"

    def test_train_steps_zero_keeps_init(self, trained, tmp_path):
        from cascade_draft.drafter import CascadeDrafter
        from cascade_draft.target_model import TargetModel
        tmp, cfg = trained
        out = tmp_path / "d0.fegl"
        cfg0 = write_config(tmp_path, f"train.steps = 0\npaths.target = {tmp / 't.fegl'}\n"
                                      f"paths.data = {tmp / 'train.fegd'}\n")
        assert main(["train-drafter", "--config", cfg0, "--out", str(out)]) == 0
        rc = RunConfig.load(cfg0)
        target = TargetModel.load_weights(tmp / "t.fegl", rc.model)
        fresh = CascadeDrafter.init(rc.drafter, target, rc.seed)
        loaded = CascadeDrafter.load_weights(out, rc.drafter, target)
        for k in fresh.params:
            assert (fresh.params[k].data == loaded.params[k].data).all()
        assert len((tmp_path / "d0.loss.csv").read_text().splitlines()) == 1

    def test_train_dim_mismatch(self, trained, tmp_path, capsys):
        tmp, _ = trained
        cfg = write_config(tmp_path, f"drafter.hidden_dim = 8\npaths.target = {tmp / 't.fegl'}\n")
        assert main(["train-drafter", "--config", cfg]) == 2
        assert "hidden_dim" in capsys.readouterr().err

    def test_generate_greedy_matches_vanilla(self, trained, capsys):
        _, cfg = trained
        assert main(["generate", "--config", cfg, "--mode", "vanilla"]) == 0
        vanilla = capsys.readouterr().out.splitlines()
        assert main(["generate", "--config", cfg, "--mode", "cascade_tree"]) == 0
        tree = capsys.readouterr().out.splitlines()
        assert vanilla[:-1] == tree[:-1] and len(vanilla) == 4

    def test_generate_sampled_repeatable(self, trained, capsys):
        _, cfg = trained
        runs = []
        for _ in range(2):
            assert main(["generate", "--config", cfg, "--temperature", "1.0", "--seed", "3"]) == 0
            runs.append(capsys.readouterr().out)
        assert runs[0] == runs[1]

    def test_generate_prompt_file(self, trained, tmp_path, capsys):
        _, cfg = trained
        (tmp_path / "p.txt").write_text("# two prompts\n1 2 3\n\n4 5\n")
        assert main(["generate", "--config", cfg, "--prompts", str(tmp_path / "p.txt")]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 3

    def test_generate_missing_weights(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["generate", "--config", cfg]) == 2
        assert "not found" in capsys.readouterr().err

    def test_verify_lossless(self, trained, capsys):
        _, cfg = trained
        for k in ("1", "4"):
            assert main(["verify-lossless", "--config", cfg, "--topk", k]) == 0
            out = capsys.readouterr().out.splitlines()
            assert out and all(line.startswith("PASS") for line in out)

    def test_verify_lossless_negative_control(self, trained, capsys):
        _, cfg = trained
        assert main(["verify-lossless", "--config", cfg, "--corrupt-acceptance"]) == 1
        out = capsys.readouterr().out
        assert "FAIL  exact enumeration" in out

    def test_bench(self, trained, capsys):
        tmp, cfg = trained
        out = tmp / "m.jsonl"
        assert main(["bench", "--config", cfg, "--out", str(out)]) == 0
        table = capsys.readouterr().out.splitlines()
        assert [row.split()[0] for row in table[1:5]] == ["vanilla", "cascade_tree", "cascade_chain",
                                                           "parallel_heads"]
        lines = out.read_text().splitlines()
        summaries = [json.loads(x) for x in lines if '"summary"' in x]
        assert len(summaries) == 4
        for s in summaries:
            assert recount_tau(lines, s["mode"]) == s["tau"]

    def test_bench_deterministic_without_timing(self, trained):
        tmp, cfg = trained

        def strip(path):
            recs = [json.loads(x) for x in path.read_text().splitlines()]
            for r in recs:
                for key in ("wall_time", "wall_speedup"):
                    r.pop(key, None)
            return recs

        main(["bench", "--config", cfg, "--out", str(tmp / "r1.jsonl")])
        main(["bench", "--config", cfg, "--out", str(tmp / "r2.jsonl")])
        assert strip(tmp / "r1.jsonl") == strip(tmp / "r2.jsonl")

    def test_log_level_env(self, trained, monkeypatch, capsys):
        _, cfg = trained
        monkeypatch.setenv("FEGL_LOG", "info")
        assert main(["generate", "--config", cfg]) == 0
        assert "resolved config" in capsys.readouterr().err
        monkeypatch.setenv("FEGL_LOG", "loud")
        assert main(["generate", "--config", cfg]) == 2

    def test_config_required(self):
        with pytest.raises(SystemExit):
            main(["bench"])
