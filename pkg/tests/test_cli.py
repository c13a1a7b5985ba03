import json

import pytest

from httpfake import FakeServer, chat_reply
from ssrmt.cli import main
from ssrmt.policy import saturated_params
from ssrmt.task import read_cipher, read_jsonl
from ssrmt.trainer import TrainConfig, save_checkpoint


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--seed", "7", "--vocab", "20", "--pairs", "500", "--len-min", "5", "--len-max", "12",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    assert main(["gen-data", "--seed", "3", "--vocab", "6", "--pairs", "40", "--len-min", "2", "--len-max", "4",
                 "--out", str(out)]) == 0
    return out


def write_config(path, data, **extra):
    cfg = {"batch_size": 8, "group_size": 4, "epochs": 1, "checkpoint_every": 5,
           "data": {k: str(data / f) for k, f in (("train", "train.jsonl"), ("test", "test.jsonl"),
                                                   ("cipher", "cipher.json"))}}
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_counts_and_determinism(data_dir, tmp_path):
    train, test = read_jsonl(data_dir / "train.jsonl"), read_jsonl(data_dir / "test.jsonl")
    assert len(train) + len(test) == 1000
    assert main(["gen-data", "--seed", "7", "--out", str(tmp_path)]) == 0
    for name in ("train.jsonl", "test.jsonl", "cipher.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_gen_data_rejects_zero_pairs(tmp_path, capsys):
    assert main(["gen-data", "--pairs", "0", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_train_eval_and_report(small_data, tmp_path, capsys):
    run = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", small_data)
    assert main(["train", "--config", str(cfg), "--out", str(run), "--reward-mode", "ssr"]) == 0
    out = capsys.readouterr().out
    assert "best checkpoint: step" in out
    ckpts = sorted((run / "checkpoints").glob("*.npz"))
    assert ckpts
    assert json.loads((run / "config.json").read_text())["reward_mode"] == "ssr"

    assert main(["eval", "--checkpoint", str(ckpts[-1]), "--testset", str(small_data / "test.jsonl"),
                 "--json", str(tmp_path / "e.json")]) == 0
    assert "aggregated" in capsys.readouterr().out
    assert "ref_score" in json.loads((tmp_path / "e.json").read_text())

    assert main(["report", "--run", str(run), "--delimiter", "\t"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.splitlines()
    assert lines[0].split("\t")[:2] == ["step", "mean_r_all"]
    assert len(lines) == 1 + 5  # 40 prompts, batch 8, one epoch
    assert "# best checkpoint" in captured.err
    assert (run / "figures" / "rewards.png").stat().st_size > 0


def test_eval_fresh_vs_trained(data_dir, tmp_path, capsys):
    fresh = tmp_path / "fresh.npz"
    assert main(["init-policy", "--cipher", str(data_dir / "cipher.json"), "--out", str(fresh)]) == 0
    trained = save_checkpoint(tmp_path / "trained.npz", saturated_params(read_cipher(data_dir / "cipher.json")),
                              40, TrainConfig(), [])
    scores = []
    for ckpt in (fresh, trained):
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--testset", str(data_dir / "test.jsonl"),
                     "--json", str(tmp_path / "r.json")]) == 0
        scores.append(json.loads((tmp_path / "r.json").read_text())["aggregated"])
    assert scores[0] < scores[1] == 1.0


def test_eval_missing_checkpoint(data_dir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--testset",
                 str(data_dir / "test.jsonl")]) != 0


def test_ssr_x_without_references_fails_before_training(small_data, tmp_path, capsys):
    no_ref = tmp_path / "train.jsonl"
    rows = [json.loads(x) for x in (small_data / "train.jsonl").read_text().splitlines()]
    no_ref.write_text("".join(json.dumps({k: v for k, v in r.items() if k != "ref_text"}) + "\n" for r in rows))
    cfg = write_config(tmp_path / "c.json", small_data)
    raw = json.loads(cfg.read_text())
    raw["data"]["train"] = str(no_ref)
    cfg.write_text(json.dumps(raw))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--reward-mode", "ssr_x"]) == 2
    assert "ref" in capsys.readouterr().err
    assert not (tmp_path / "run" / "metrics.csv").exists()


def test_resume_through_cli(small_data, tmp_path):
    cfg = write_config(tmp_path / "c.json", small_data, epochs=2)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--max-steps", "4"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--resume",
                 str(tmp_path / "b" / "checkpoints" / "step_000004.npz")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "3", "--resume",
                 str(tmp_path / "b" / "checkpoints" / "step_000004.npz")]) == 2


def test_unknown_config_key(small_data, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", small_data, batchsize=4)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "batchsize" in capsys.readouterr().err


@pytest.fixture
def perfect_checkpoint(data_dir, tmp_path):
    return save_checkpoint(tmp_path / "sat.npz", saturated_params(read_cipher(data_dir / "cipher.json")), 0,
                           TrainConfig(), [])


def _judge(capsys, argv):
    capsys.readouterr()
    assert main(["judge"] + argv) == 0
    captured = capsys.readouterr()
    return json.loads(captured.out), captured.err


def test_judge_toy_correct_translation(data_dir, perfect_checkpoint, capsys):
    cipher = read_cipher(data_dir / "cipher.json")
    src = "a0 a1 a2 a3 a4"
    common = ["--src", src, "--src-lang", "LangA", "--tgt-lang", "LangB", "--checkpoint", str(perfect_checkpoint)]
    result, _ = _judge(capsys, common + ["--mt", cipher.translate(src)])
    assert result == {"score": 100, "parse_ok": True, "raw_text": result["raw_text"], "with_reference": False}
    wrong, _ = _judge(capsys, common + ["--mt", src])
    assert wrong["score"] == 0 and wrong["parse_ok"]


def test_judge_with_reference_echoes_prompt(data_dir, perfect_checkpoint, capsys):
    cipher = read_cipher(data_dir / "cipher.json")
    src = "a5 a6"
    result, err = _judge(capsys, ["--src", src, "--mt", cipher.translate(src), "--src-lang", "LangA",
                                  "--tgt-lang", "LangB", "--ref", cipher.translate(src), "--checkpoint",
                                  str(perfect_checkpoint), "-v"])
    assert result["with_reference"] and result["score"] == 100
    assert f"LangB reference: {cipher.translate(src)}" in err


def test_judge_over_http_unparseable_reply(capsys):
    with FakeServer([(200, chat_reply("I would rather not give a number."))]) as srv:
        result, _ = _judge(capsys, ["--src", "Hallo", "--mt", "Hello", "--src-lang", "German", "--tgt-lang",
                                    "English", "--url", srv.url])
    assert result["score"] is None and result["parse_ok"] is False
    assert srv.requests[0]["temperature"] == 0.0


def test_judge_backend_down(capsys):
    with FakeServer([(500, {})]) as srv:
        assert main(["judge", "--src", "a", "--mt", "b", "--src-lang", "x", "--tgt-lang", "y", "--url", srv.url,
                     "--retries", "0"]) == 1
