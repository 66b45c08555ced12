import json

import numpy as np
import pytest

from oracles import central_difference, logistic_loss, rel_err
from rkalign.data import (
    ClassifierJudge,
    ClassifierTrainSet,
    DataError,
    Filtered,
    OracleJudge,
    PreferencePair,
    PromptRecord,
    RolloutSet,
    build_offpolicy_dataset,
    build_preference_dataset,
    classifier_features,
    generate_task,
    halluc_set_size,
    hallucination_rate,
    judge,
    logistic_loss_and_grad,
    make_classifier_corpus,
    read_annotations,
    read_pairs,
    read_prompts,
    read_rollouts,
    select_pair,
    train_classifier,
    write_annotations,
    write_pairs,
    write_prompts,
    write_rollouts,
)
from rkalign.policy import FeatureMap, Policy, Response, end_token, init_policy


def rollout(probs) -> RolloutSet:
    return RolloutSet(0, tuple(Response((i,), -1.0) for i in range(len(probs))), tuple(probs))


class TestGenerateTask:
    def test_deterministic(self):
        assert generate_task(3, 20, 16) == generate_task(3, 20, 16)

    def test_halluc_set_size(self):
        for p in generate_task(0, 50, 16, 0.25):
            assert len(p.halluc_set) == 4

    def test_ground_truth_avoids_h_by_scan(self):
        for p in generate_task(1, 200, 16, 0.125):
            for tok in p.gt_tokens:
                assert all(tok != h for h in p.halluc_set)
            assert p.gt_tokens[-1] == end_token(16)
            assert end_token(16) not in p.halluc_set

    def test_errors(self):
        with pytest.raises(DataError):
            generate_task(0, 5, 16, 0.0)
        with pytest.raises(DataError):
            generate_task(0, 5, 16, 1.0)
        with pytest.raises(DataError):
            generate_task(0, 5, 4, 0.01)  # rounds to |H| = 0
        with pytest.raises(DataError):
            generate_task(0, 0, 16)
        assert halluc_set_size(16, 0.125) == 2

    def test_prompt_record_invariants(self):
        with pytest.raises(DataError):
            PromptRecord(0, (1, 2, 9), frozenset())
        with pytest.raises(DataError):
            PromptRecord(0, (1, 2, 9), frozenset({2}))


class TestJudge:
    prompt = PromptRecord(0, (1, 2, 9), frozenset({4, 5}))

    def test_oracle_hallucinated(self):
        assert judge(OracleJudge(), self.prompt, Response((1, 4, 9), 0.0)) == 1.0

    def test_oracle_ground_truth(self):
        assert judge(OracleJudge(), self.prompt, self.prompt.gt_tokens) == 0.0

    def test_oracle_noise_rate_and_repeatability(self):
        j = OracleJudge(noise=0.2, seed=1)
        prompts = generate_task(0, 400, 16, 0.125)
        flips = 0
        for p in prompts:
            a = j.probability(p, p.gt_tokens)
            assert a == j.probability(p, p.gt_tokens)
            flips += a == 1.0
        assert abs(flips / 400 - 0.2) < 0.05

    def test_oracle_soft_scores(self):
        j = OracleJudge(soft=0.01)
        assert judge(j, self.prompt, (4,)) == 0.99 and judge(j, self.prompt, (1,)) == 0.01

    def test_oracle_bad_noise(self):
        with pytest.raises(DataError):
            OracleJudge(noise=0.5)

    def test_classifier_probability_range(self):
        clf = ClassifierJudge(np.linspace(-3, 3, 10 + 2 + 100), 0.1, 10)
        for tokens in [(1,), (4, 5, 9), (0, 0, 0)]:
            assert 0 <= judge(clf, self.prompt, tokens) <= 1


class TestClassifier:
    def test_separable_toy_set(self):
        # label = presence of token 0 in the response
        gen = np.random.default_rng(0)
        prompt = PromptRecord(0, (1, 2, 5), frozenset({0}))
        rows, labels = [], []
        for _ in range(200):
            tokens = tuple(int(t) for t in gen.integers(0, 5, size=gen.integers(1, 5))) + (5,)
            rows.append(classifier_features(prompt, tokens, 6))
            labels.append(float(0 in tokens))
        ts = ClassifierTrainSet(np.array(rows), np.array(labels), 0.25)
        clf = train_classifier(ts, lr=0.5, epochs=10, seed=0, vocab_size=6)
        assert clf.validation_accuracy == 1.0

    def test_zero_epochs_majority_rate(self):
        gen = np.random.default_rng(1)
        x = gen.normal(size=(300, 4))
        y = (gen.random(300) < 0.3).astype(float)
        ts = ClassifierTrainSet(x, y, 0.2)
        clf = train_classifier(ts, epochs=0, seed=2, vocab_size=1)
        train_idx, val_idx = ts.split(2)
        majority = float(y[train_idx].mean() >= 0.5)
        assert clf.validation_accuracy == pytest.approx(float(np.mean(y[val_idx] == majority)))

    def test_gradient_finite_differences(self):
        gen = np.random.default_rng(3)
        x = gen.normal(size=(40, 5))
        y = (gen.random(40) < 0.5).astype(float)
        w, b = gen.normal(size=5), 0.3
        loss, gw, gb = logistic_loss_and_grad(w, b, x, y)
        assert loss == pytest.approx(logistic_loss(w, b, x, y), rel=1e-12)
        theta = np.append(w, b)
        fd = central_difference(lambda t: logistic_loss(t[:-1], t[-1], x, y), theta)
        assert rel_err(np.append(gw, gb), fd) < 1e-5

    def test_loss_non_increasing_small_lr(self):
        prompts = generate_task(0, 64, 16, 0.125)
        ts = make_classifier_corpus(prompts, 500, 16, 0)
        history = []
        train_classifier(ts, lr=0.05, epochs=200, seed=0, vocab_size=16, history=history)
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            train_classifier(ClassifierTrainSet(np.ones((10, 2)), np.zeros(10)), vocab_size=1)

    def test_split_disjoint(self):
        ts = ClassifierTrainSet(np.zeros((50, 2)), np.zeros(50), 0.3)
        tr, va = ts.split(0)
        assert not set(tr) & set(va) and len(tr) + len(va) == 50

    def test_labels_validated(self):
        with pytest.raises(DataError):
            ClassifierTrainSet(np.zeros((2, 2)), np.array([0.0, 0.5]))

    def test_features_shape_and_side_information(self):
        p = PromptRecord(0, (1, 2, 9), frozenset({4}))
        x = classifier_features(p, (1, 4, 4, 9), 10)
        assert x.shape == (10 + 2 + 100,)
        assert x[4] == 1.0 and x[10] == 1.0 and x[11] == 2.0  # presence, overlap, outside

    def test_round_trip_dict(self):
        clf = ClassifierJudge(np.arange(3.0), -0.5, 1, 0.9)
        back = ClassifierJudge.from_dict(json.loads(json.dumps(clf.to_dict())))
        assert np.array_equal(back.weights, clf.weights) and back.bias == clf.bias

    def test_reaches_ninety_percent(self):
        prompts = generate_task(0, 256, 16, 0.125)
        clf = train_classifier(make_classifier_corpus(prompts, 2000, 16, 0), seed=0, vocab_size=16)
        assert clf.validation_accuracy >= 0.90


class TestSelectPair:
    def test_basic(self):
        out = select_pair(rollout((0.1, 0.9)))
        assert out.chosen.tokens == (0,) and out.rejected.tokens == (1,)

    def test_all_clean_filtered(self):
        out = select_pair(rollout((0.1, 0.2, 0.4)))
        assert isinstance(out, Filtered) and out.reason == "all_clean"

    def test_all_hallucinated_filtered(self):
        out = select_pair(rollout((0.6, 0.5)))
        assert isinstance(out, Filtered) and out.reason == "all_halluc"

    def test_tie_rule(self):
        probs = (0.3, 0.3, 0.7, 0.7)
        out = select_pair(rollout(probs))
        lo = min(range(4), key=lambda i: (probs[i], i))
        hi = min(range(4), key=lambda i: (-probs[i], i))
        assert (out.chosen.tokens, out.rejected.tokens) == ((lo,), (hi,)) == ((0,), (2,))

    def test_half_is_hallucinated(self):
        out = select_pair(rollout((0.49, 0.5)))
        assert out.p_chosen == 0.49 and out.p_rejected == 0.5

    def test_k_at_least_two(self):
        with pytest.raises(DataError):
            RolloutSet(0, (Response((1,), 0.0),), (0.1,))


def _task_policy(seed=0, n=32):
    prompts = generate_task(seed, n, 16, 0.125)
    return prompts, init_policy(FeatureMap(16, dim=32, seed=seed, prompt_scale=2.0), 1.5, seed, min_len=3)


class TestBuildDataset:
    def test_clean_policy_filters_everything(self):
        prompts = generate_task(0, 10, 16, 0.125)
        banned = set().union(*(p.halluc_set for p in prompts))
        support = np.array([t not in banned for t in range(16)])
        policy = Policy(np.zeros((8, 16)), FeatureMap(16, dim=8), support)
        data = build_preference_dataset(prompts, policy, OracleJudge(), k=5)
        assert data.pairs == [] and data.stats.filtered_all_clean == 10

    def test_counts_sum_to_prompts(self):
        prompts, policy = _task_policy(1, 40)
        data = build_preference_dataset(prompts, policy, OracleJudge(), k=5, seed=3)
        s = data.stats
        assert s.admitted + s.filtered_all_clean + s.filtered_all_halluc == 40
        assert s.admitted > 0

    def test_chosen_free_of_hallucination_tokens(self):
        prompts, policy = _task_policy(2, 40)
        by_id = {p.id: p for p in prompts}
        for pair in build_preference_dataset(prompts, policy, OracleJudge(), k=5, seed=4).pairs:
            assert not set(pair.chosen.tokens) & by_id[pair.prompt].halluc_set
            assert set(pair.rejected.tokens) & by_id[pair.prompt].halluc_set

    def test_deterministic_across_workers(self):
        prompts, policy = _task_policy(3, 30)
        a = build_preference_dataset(prompts, policy, OracleJudge(), seed=5, workers=1)
        b = build_preference_dataset(prompts, policy, OracleJudge(), seed=5, workers=4)
        assert a.pairs == b.pairs and a.stats == b.stats

    def test_errors(self):
        _, policy = _task_policy()
        with pytest.raises(DataError):
            build_preference_dataset([], policy, OracleJudge())
        with pytest.raises(DataError):
            build_preference_dataset(generate_task(0, 2, 16, 0.125), policy, OracleJudge(), k=1)

    def test_offpolicy_chosen_is_ground_truth(self):
        prompts, policy = _task_policy(4, 30)
        by_id = {p.id: p for p in prompts}
        data = build_offpolicy_dataset(prompts, policy, OracleJudge(), k=5, seed=1, retries=3)
        assert data.stats.admitted + data.stats.skipped == 30
        for pair in data.pairs:
            assert pair.chosen.tokens == by_id[pair.prompt].gt_tokens
            assert pair.p_rejected >= 0.5

    def test_hallucination_rate_range(self):
        prompts, policy = _task_policy(5, 30)
        assert 0.0 <= hallucination_rate(policy, prompts) <= 1.0


class TestJsonLines:
    def test_round_trips(self, tmp_path):
        prompts = generate_task(0, 5, 16, 0.125)
        write_prompts(tmp_path / "p.jsonl", prompts)
        assert read_prompts(tmp_path / "p.jsonl") == prompts

        resp = [Response((1, 2, 15), -2.5), Response((3, 15), -1.25)]
        write_rollouts(tmp_path / "r.jsonl", [(0, resp)])
        assert [r for _, r in read_rollouts(tmp_path / "r.jsonl")[0]] == resp

        write_annotations(tmp_path / "a.jsonl", [(0, 0, 0.0), (0, 1, 0.5)])
        assert read_annotations(tmp_path / "a.jsonl") == {(0, 0): (0.0, 0), (0, 1): (0.5, 1)}

        pair = PreferencePair(0, resp[0], resp[1], 0.0, 1.0)
        write_pairs(tmp_path / "x.jsonl", [pair])
        back = read_pairs(tmp_path / "x.jsonl")[0]
        assert back.chosen.tokens == (1, 2, 15) and back.rejected.tokens == (3, 15)

    def test_schema_by_independent_parse(self, tmp_path):
        write_prompts(tmp_path / "p.jsonl", generate_task(0, 5, 16, 0.125))
        for line in (tmp_path / "p.jsonl").read_text(encoding="utf-8").splitlines():
            row = json.loads(line)
            assert set(row) == {"id", "gt_tokens", "halluc_set"}
            assert isinstance(row["id"], int)
            assert all(isinstance(t, int) for t in row["gt_tokens"] + row["halluc_set"])

    def test_unknown_fields_ignored(self, tmp_path):
        (tmp_path / "p.jsonl").write_text('{"id": 3, "gt_tokens": [1, 15], "halluc_set": [4], "note": "x"}\n')
        assert read_prompts(tmp_path / "p.jsonl")[0].id == 3
