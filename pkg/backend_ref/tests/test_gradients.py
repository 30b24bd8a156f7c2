"""Analytic soft-prompt gradients against a finite-difference oracle."""

import json

import numpy as np

from backend_ref.stub import StubResponder

DIM = 12
STEP = 1e-5
REL_TOL = 1e-4


def call(responder, payload: dict) -> dict:
    reply = json.loads(responder.reply_line(json.dumps(payload) + "\n"))
    assert "error" not in reply, reply
    return reply


def cosine_loss(responder, word, prefix, suffix, target) -> float:
    reply = call(responder, {"id": 1, "op": "word_vector", "word": word,
                             "prefix": prefix, "suffix": suffix})
    out = np.asarray(reply["vector"])
    goal = np.asarray(target)
    return 1.0 - float(out @ goal) / (
        np.linalg.norm(out) * np.linalg.norm(goal))


def finite_difference(responder, word, prefix, suffix, target, block, row,
                      col) -> float:
    bumped = [list(r) for r in (prefix if block == "prefix" else suffix)]
    bumped[row][col] += STEP
    plus = cosine_loss(responder, word,
                       bumped if block == "prefix" else prefix,
                       bumped if block == "suffix" else suffix, target)
    bumped[row][col] -= 2 * STEP
    minus = cosine_loss(responder, word,
                        bumped if block == "prefix" else prefix,
                        bumped if block == "suffix" else suffix, target)
    return (plus - minus) / (2 * STEP)


def test_analytic_gradients_match_central_differences():
    rng = np.random.default_rng(123)
    responder = StubResponder(seed=9, dim=DIM, n_styles=5)
    for trial in range(6):
        word = ("poetic", "formal", "zephyr")[trial % 3]
        n_prefix, n_suffix = 1 + trial % 3, 1 + (trial + 1) % 2
        prefix = rng.normal(scale=0.5,
                            size=(n_prefix, DIM)).round(6).tolist()
        suffix = rng.normal(scale=0.5,
                            size=(n_suffix, DIM)).round(6).tolist()
        target = rng.normal(size=DIM).round(6).tolist()

        reply = call(responder, {
            "id": 2, "op": "grad_word_vector", "word": word,
            "prefix": prefix, "suffix": suffix, "target": target})
        assert reply["loss"] == cosine_loss(responder, word, prefix,
                                            suffix, target)

        for block, rows, grads in (("prefix", prefix, reply["grad_prefix"]),
                                   ("suffix", suffix, reply["grad_suffix"])):
            assert len(grads) == len(rows)
            for row in range(len(rows)):
                analytic = np.asarray(grads[row])
                numeric = np.asarray([
                    finite_difference(responder, word, prefix, suffix,
                                      target, block, row, col)
                    for col in range(DIM)])
                gap = np.linalg.norm(analytic - numeric)
                assert gap <= REL_TOL * np.linalg.norm(numeric), \
                    (trial, block, row, gap)


def test_gradient_descent_on_the_reported_gradients_reduces_loss():
    rng = np.random.default_rng(7)
    responder = StubResponder(seed=9, dim=DIM, n_styles=5)
    prefix = rng.normal(scale=0.5, size=(2, DIM)).tolist()
    suffix = rng.normal(scale=0.5, size=(1, DIM)).tolist()
    target = rng.normal(size=DIM).tolist()
    losses = []
    for _ in range(25):
        reply = call(responder, {
            "id": 3, "op": "grad_word_vector", "word": "poetic",
            "prefix": prefix, "suffix": suffix, "target": target})
        losses.append(reply["loss"])
        prefix = [[v - 2.0 * g for v, g in zip(row, grad)]
                  for row, grad in zip(prefix, reply["grad_prefix"])]
        suffix = [[v - 2.0 * g for v, g in zip(row, grad)]
                  for row, grad in zip(suffix, reply["grad_suffix"])]
    assert losses[-1] < 0.2 * losses[0]
