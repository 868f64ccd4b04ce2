"""Smoke test for the `uoep` extension module.

Build first with `cargo build -p uoep-py --release`. If `uoep` is not
importable, the freshly built library is copied next to a temporary path
under the name Python expects.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path


def load():
    try:
        import uoep
        return uoep
    except ImportError:
        pass
    root = Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        built = root / "target" / profile / "libuoep.so"
        if built.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(built, tmp / "uoep.so")
            sys.path.insert(0, str(tmp))
            import uoep
            return uoep
    sys.exit("libuoep.so not found; run `cargo build -p uoep-py --release`")


def main():
    uoep = load()

    assert uoep.gini([3.0, 3.0, 3.0]) == 0.0
    assert abs(uoep.gini([0.0, 7.0]) - 0.5) < 1e-15
    assert uoep.empirical_cvar([1, 2, 3, 4, 5], 0.4) == 1.5
    assert uoep.atr_top([1, 2, 3, 4, 5], 0.4) == 4.5
    assert uoep.top_n([0.1, 0.9, 0.9, 0.3], 2) == [1, 2]
    assert abs(uoep.quantile_huber(-2.0, 0.9, 1.0) - 0.15) < 1e-12
    assert uoep.decayed_alpha(0.2, 0.5, 0, 100) == 1.0
    stab, div = uoep.simulate_bandit(0.9, 0.1, 2000, seed=1)
    assert stab / 2000 > 0.8, (stab, div)
    try:
        uoep.gini([])
        raise AssertionError("empty input accepted")
    except ValueError:
        pass

    env = uoep.Environment.synthetic(users=30, items=40, dim=4, seed=2)
    assert (env.n_users, env.n_items, env.action_dim) == (30, 40, 4)
    low = env.users_by_activity()[:6]
    assert env.restricted_to(low).n_users == 30

    config = {
        "steps": 300,
        "eval_interval": 100,
        "eval_episodes": 4,
        "alphas": [0.5, 1.0],
        "critic_hidden": [16],
        "actor_hidden": [8],
        "batch_size": 16,
        "seed": 5,
    }
    trainer = uoep.Trainer(config, env)
    assert trainer.population_size == 2
    records = trainer.run()
    assert trainer.steps_done == 300
    assert [r["step"] for r in records] == [100, 200, 300]
    assert len(records[-1]["per_actor_mean_return"]) == 2

    again = uoep.Trainer(config, env).run()
    assert again == records, "training is not deterministic"

    report = trainer.evaluate(episodes=10, seed=0)
    assert len(report["total_rewards"]) == 10
    assert math.isfinite(report["total_reward_mean"])

    state = env.start_state(0)
    action = trainer.actions(0, [state])[0]
    assert len(action) == 4 and all(-1.0 <= a <= 1.0 for a in action)
    z = trainer.quantiles(state, action, [0.1, 0.5, 0.9])
    assert len(z) == 3

    with tempfile.TemporaryDirectory() as tmp:
        trainer.save_checkpoint(tmp)
        assert (Path(tmp) / "critic.bin").exists()

    try:
        uoep.Trainer({"no_such_key": 1})
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    print("python smoke test passed")


if __name__ == "__main__":
    main()
