def test_cli_delegates_to_the_command(monkeypatch, tmp_path):
    called = {"cfg": None}

    def fake_solve(cfg):
        from runner.service import RunOutcome

        called["cfg"] = cfg
        return RunOutcome(0, {"command": "solve"}, [])

    import runner.service

    monkeypatch.setitem(runner.service.COMMANDS, "solve", fake_solve)

    from mfc_run import main

    code = main(["solve", "--atoms", "7", "--steps", "12", "--seed", "3", "--out", str(tmp_path)])
    assert code == 0
    cfg = called["cfg"]
    assert cfg.ensemble.M == 7
    assert cfg.grid.N == 12
    assert cfg.ensemble.seed == 3
    assert cfg.output_dir == str(tmp_path)
    assert cfg.force is False


def test_cli_checks_replace_the_file_list(monkeypatch, tmp_path):
    import json

    seen = {}

    def fake_solve(cfg):
        from runner.service import RunOutcome

        seen["checks"] = list(cfg.diagnostics.checks)
        return RunOutcome(1, {"command": "solve"}, [])

    import runner.service

    monkeypatch.setitem(runner.service.COMMANDS, "solve", fake_solve)
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"diagnostics": {"checks": ["grad-check"]}}), encoding="utf-8")

    from mfc_run import main

    assert main(["solve", "--config", str(path), "--check", "lq-validate", "--check", "bellman-check"]) == 1
    assert seen["checks"] == ["lq-validate", "bellman-check"]


def test_cli_config_errors_exit_two(tmp_path):
    from mfc_run import main

    assert main(["solve", "--model", "no_such_model", "--out", str(tmp_path)]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 2


def test_cli_gate_exits_four(tmp_path):
    import json

    from mfc_run import main

    path = tmp_path / "nonconvex.json"
    path.write_text(json.dumps({
        "model": {"name": "lq_scalar", "params": {"q": -1.0, "q_T": -0.5, "lam_bar": 0.0}},
        "grid": {"T": 2.0, "N": 8},
        "ensemble": {"M": 3, "K": 1},
        "eta": 0.0,
    }), encoding="utf-8")
    assert main(["solve", "--config", str(path), "--out", str(tmp_path / "out")]) == 4


def test_cli_maps_gate_errors_raised_by_commands(monkeypatch):
    from mfc.errors import AssumptionGateError, ConvergenceError

    import runner.service

    def refuse(cfg):
        raise AssumptionGateError("delta1 condition fails")

    def stall(cfg):
        raise ConvergenceError("no fixed point")

    monkeypatch.setitem(runner.service.COMMANDS, "master-check", refuse)
    monkeypatch.setitem(runner.service.COMMANDS, "solve", stall)

    from mfc_run import main

    assert main(["master-check"]) == 4
    assert main(["solve"]) == 3


def test_cli_check_times_off_the_grid_exit_two(tmp_path):
    import json

    from mfc_run import main

    for times in ([0.33], [1.0]):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({
            "grid": {"T": 1.0, "N": 10},
            "diagnostics": {"checks": ["bellman-check"], "probe_times": times},
        }), encoding="utf-8")
        assert main(["bellman-check", "--config", str(path), "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out").exists()
