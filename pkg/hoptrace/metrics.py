from collections import Counter
from typing import Sequence

from . import example, operation
from .model import answer_tokens, contains_gold, normalize_answer


def _check_gold(gold_answers: Sequence[str]) -> None:
    if not gold_answers:
        raise ValueError("gold_answers must not be empty")


@example(True, prediction="London", gold_answers=["London"])
@example(False, prediction="London, England", gold_answers=["London"])
@example(True, prediction="the London", gold_answers=["London"])
@example(True, prediction="UK", gold_answers=["United Kingdom", "UK"])
@operation(module="eval-harness")
def exact_match(prediction: str, gold_answers: Sequence[str]) -> bool:
    _check_gold(gold_answers)
    normalized = normalize_answer(prediction)
    return any(normalized == normalize_answer(gold) for gold in gold_answers)


@example(True, prediction="in London, England", gold_answers=["London"])
@example(False, prediction="Lond", gold_answers=["London"])
@example(True, prediction="Steven Spielberg", gold_answers=["Steven Spielberg"])
@operation(module="eval-harness")
def accuracy_contains(prediction: str, gold_answers: Sequence[str]) -> bool:
    _check_gold(gold_answers)
    return contains_gold(prediction, gold_answers)


def _f1(prediction_tokens: list[str], gold_tokens: list[str]) -> float:
    if not prediction_tokens and not gold_tokens:
        return 1.0
    common = Counter(prediction_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(prediction_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


@example(2 / 3, prediction="London England", gold_answers=["London"])
@example(1.0, prediction="Ridley Scott", gold_answers=["Ridley Scott"])
@example(0.0, prediction="Paris", gold_answers=["London"])
@example(0.0, prediction="", gold_answers=["London"])
@example(1.0, prediction="London England", gold_answers=["Paris", "England London"])
@operation(module="eval-harness")
def token_f1(prediction: str, gold_answers: Sequence[str]) -> float:
    """SQuAD-style token F1 on normalized token multisets, maximized over gold aliases."""
    _check_gold(gold_answers)
    prediction_tokens = answer_tokens(prediction)
    return max(_f1(prediction_tokens, answer_tokens(gold)) for gold in gold_answers)
