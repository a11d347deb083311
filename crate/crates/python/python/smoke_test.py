"""Smoke test for the eas_py extension module."""

import json
import math

import eas_py


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    d = eas_py.TokenDistribution({"a": 0.9, "b": 0.1}, 151665)
    assert close(d.entropy(), -(0.9 * math.log2(0.9) + 0.1 * math.log2(0.1)))
    assert d.epsilon == 0.0 and len(d) == 2
    assert close(eas_py.truncation_error_bound(0.0015, 151665, 20), 0.0015 * math.log2(151645 / 0.0015))

    lp = eas_py.TokenDistribution.from_logprobs({"x": math.log(0.5), "y": math.log(0.25)}, 1000)
    assert close(lp.epsilon, 0.25) and lp.entries()[0] == ("x", 0.5)

    assert eas_py.eas([1.0, 1.0, 1.0]) == 3.0
    assert eas_py.eas([1.0, 2.0], stride=4) == 12.0
    assert eas_py.mean_eas([0.0, 2.0]) == 1.0
    assert close(eas_py.perplexity([math.log(0.5)] * 3), 2.0)
    assert eas_py.answer_entropy(["1/2", "0.5", "\\boxed{0.50}", "3"]) > 0.8
    assert eas_py.correctness_entropy(2, 4) == 1.0
    assert eas_py.canonicalize_answer(" \\boxed{2/4} ") == eas_py.canonicalize_answer("0.5")

    assert eas_py.enumerate_probe_positions(10, 4) == [1, 5, 9]
    assert eas_py.locate_answer_end("so \\boxed{42}") >= 2

    r, p = eas_py.pearson([1.0, 2.0, 3.0, 4.0], [2.0, 4.1, 5.9, 8.2])
    assert r > 0.99 and p < 0.01
    slope, intercept = eas_py.linear_regression([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
    assert close(slope, 2.0) and close(intercept, 1.0)
    assert close(sum(eas_py.zscore_normalize([1.0, 2.0, 3.0])), 0.0)
    assert close(eas_py.student_t_cdf(0.0, 5.0), 0.5)

    rows = [[0.6, 0.4], [0.3, 0.7], [0.2, 0.8]]
    assert eas_py.decayed_cumulative_option_probs(rows, 0.0) == eas_py.cumulative_option_probs(rows)
    assert eas_py.crossing_count(eas_py.cumulative_option_probs(rows)) == 1
    assert eas_py.bucket_by_answer_entropy(1.0) == "medium"

    tie = eas_py.SyntheticProfile("persistent_tie", 50, 3)
    lock = eas_py.SyntheticProfile("early_lockin", 50, 3)
    h_tie, opt_rows = tie.harvest()
    h_lock, _ = lock.harvest()
    assert len(h_tie) == 50 and len(opt_rows) == 50
    assert eas_py.eas(h_lock) < eas_py.eas(h_tie)
    assert tie.distribution(1, 1000).k == 4

    pool = "\n".join(
        json.dumps({"sample_id": f"s{i}", "eas": float(i), "token_length": 100 + i}) for i in range(10)
    )
    manifest = json.loads(eas_py.select("eas", pool, 3))
    assert manifest["selected_ids"] == ["s9", "s8", "s7"]
    try:
        eas_py.select("pass_rate", pool, 3)
    except ValueError:
        pass
    else:
        raise AssertionError("pass_rate without pass rates must fail")

    print(f"eas_py {eas_py.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
