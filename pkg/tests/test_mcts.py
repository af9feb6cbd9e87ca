from decimal import Decimal, getcontext
import math
import random

import pytest

from conftest import INPUTS, subqa, thought

from hoptrace.backends import Backend, BackendConfig
from hoptrace.errors import SearchError
from hoptrace.evaluation import load_dataset
from hoptrace.mcts import (
    ROOT_ID, MctsConfig, SearchTree, backpropagate, dump_tree, expand_node, extract_correct_traces, load_tree,
    run_search, select_path, simulate, terminal_reward, uct_score
)
from hoptrace.model import Dataset, Question, SubQA, Thought, normalize_answer
from hoptrace.policy import Policy
from hoptrace.retrieval import InMemoryRetriever, Passage
from hoptrace.scripted import FlakyModel, ScriptedModel, ToyScriptModel

SMALL = MctsConfig(rollouts=6, max_depth=6, children_a1=2, children_a2=2)
NO_RETRY = BackendConfig(max_retries=0, retry_backoff_ms=0)


@pytest.fixture(scope="module")
def toy_questions() -> dict[str, Question]:
    return {q.id: q for q in load_dataset(INPUTS / "toy_questions.jsonl", Dataset.CUSTOM)}


@pytest.fixture(scope="module")
def retriever() -> InMemoryRetriever:
    return InMemoryRetriever.from_file(INPUTS / "toy_corpus.jsonl")


@pytest.fixture
def policy(retriever) -> Policy:
    return Policy(Backend(ToyScriptModel.from_file(INPUTS / "toy_questions.jsonl"), NO_RETRY), retriever)


def test_uct_matches_high_precision_grid():
    getcontext().prec = 50
    rng = random.Random(7)
    for _ in range(1000):
        n_s = rng.randint(1, 10_000)
        n_sa = rng.randint(1, n_s)
        q = rng.randint(0, n_sa)
        w = rng.uniform(0.0, 3.0)
        expected = Decimal(q) / Decimal(n_sa) + Decimal(w) * (Decimal(n_s).ln() / Decimal(n_sa)).sqrt()
        actual = uct_score(q, n_sa, n_s, w)
        if expected == 0:
            assert actual == 0
        else:
            assert abs(Decimal(actual) - expected) / abs(expected) <= Decimal("1e-12")


def test_uct_unvisited_child_is_infinite():
    assert uct_score(0, 0, 0, 1.414) == math.inf
    assert uct_score(0, 0, 100, 0.0) == math.inf


def _fixture_tree() -> SearchTree:
    tree = SearchTree.create(Question("t", "Q?", ("a",)), MctsConfig(), 0)
    for text in ("first", "second", "third"):
        tree.add_child(ROOT_ID, Thought(text))
    tree[ROOT_ID].expanded = True
    return tree


def test_selection_prefers_unvisited_in_creation_order():
    tree = _fixture_tree()
    tree[ROOT_ID].visit_count = 2
    tree["0.0"].visit_count, tree["0.0"].cumulative_reward = 2, 1
    assert select_path(tree) == [ROOT_ID, "0.1"]


def test_selection_ties_keep_earliest_child():
    tree = _fixture_tree()
    tree[ROOT_ID].visit_count = 6
    for child in ("0.0", "0.1", "0.2"):
        tree[child].visit_count, tree[child].cumulative_reward = 2, 1
    assert select_path(tree) == [ROOT_ID, "0.0"]


def test_selection_takes_highest_score():
    tree = _fixture_tree()
    tree[ROOT_ID].visit_count = 6
    for child, reward in (("0.0", 0), ("0.1", 2), ("0.2", 1)):
        tree[child].visit_count, tree[child].cumulative_reward = 2, reward
    assert select_path(tree) == [ROOT_ID, "0.1"]


def test_statistics_match_replay_of_rollout_log(toy_questions, policy):
    for question_id in ("toy-01", "toy-08", "toy-10"):
        tree = run_search(toy_questions[question_id], SMALL, policy, seed=11)
        assert len(tree.rollouts) == SMALL.rollouts
        visits = {node_id: 0 for node_id in tree.nodes}
        rewards = {node_id: 0 for node_id in tree.nodes}
        for record in tree.rollouts:
            assert record.path[0] == ROOT_ID and record.path[-1] == record.leaf
            for parent, child in zip(record.path, record.path[1:]):
                assert tree[child].parent == parent
            for node_id in record.path:
                visits[node_id] += 1
                rewards[node_id] += record.reward
        for node_id, node in tree.nodes.items():
            assert (node.visit_count, node.cumulative_reward) == (visits[node_id], rewards[node_id]), node_id
            assert node.cumulative_reward <= node.visit_count
            assert node.visit_count >= sum(tree[c].visit_count for c in node.children)


def test_tree_shape_invariants(toy_questions, policy):
    tree = run_search(toy_questions["toy-05"], MctsConfig(), policy, seed=3)
    for node_id, node in tree.nodes.items():
        assert node.depth <= tree.config.max_depth
        for child_id in node.children:
            child = tree[child_id]
            assert child.depth == node.depth + 1
            # thoughts expand into sub-questions and sub-questions into thoughts
            if node.is_root or isinstance(node.step, SubQA):
                assert isinstance(child.step, Thought)
            else:
                assert isinstance(child.step, SubQA)
        if node.is_terminal:
            assert not node.children


def test_search_is_deterministic_under_seed(toy_questions, policy):
    question = toy_questions["toy-04"]
    first = dump_tree(run_search(question, MctsConfig(), policy, seed=5))
    second = dump_tree(run_search(question, MctsConfig(), policy, seed=5))
    assert first == second
    assert dump_tree(load_tree(first)) == first


def test_correct_traces_end_in_the_gold_answer(toy_questions, policy):
    question = toy_questions["toy-02"]
    tree = run_search(question, MctsConfig(), policy, seed=0)
    traces = extract_correct_traces(tree)
    assert traces
    for trace in traces:
        assert trace.is_complete
        assert normalize_answer(trace.predicted_answer) in {normalize_answer(g) for g in question.gold_answers}
        assert trace.trace_id.startswith(f"{question.id}:0.")


def test_wrong_guess_is_explored_but_not_rewarded(toy_questions, policy):
    tree = run_search(toy_questions["toy-10"], MctsConfig(), policy, seed=0)
    guesses = [n for n in tree.nodes.values() if n.is_terminal and n.step.final_answer == "James Cook"]
    assert guesses
    assert all(terminal_reward(n.node_id, tree) == 0 for n in guesses)


def test_failed_playout_leaves_tree_untouched(toy_questions, retriever):
    question = toy_questions["toy-01"]
    working = Policy(Backend(ToyScriptModel.from_file(INPUTS / "toy_questions.jsonl"), NO_RETRY), retriever)
    tree = SearchTree.create(question, SMALL, 0)
    children = expand_node(tree, ROOT_ID, working)
    before = dump_tree(tree)
    broken = Policy(Backend(FlakyModel(working.generator.model, failures=10 ** 6), NO_RETRY), retriever)
    with pytest.raises(SearchError) as raised:
        simulate(tree, children[0], broken, random.Random(0))
    assert raised.value.node_id == children[0]
    assert dump_tree(tree) == before


def test_search_error_names_the_rollout(toy_questions, retriever):
    broken = Policy(Backend(FlakyModel(ToyScriptModel([]), failures=10 ** 6), NO_RETRY), retriever)
    with pytest.raises(SearchError) as raised:
        run_search(toy_questions["toy-01"], SMALL, broken, seed=0)
    assert raised.value.rollout == 0
    assert raised.value.node_id == ROOT_ID


def test_expand_rejects_terminal_and_expanded_nodes(toy_questions, policy):
    tree = SearchTree.create(toy_questions["toy-01"], SMALL, 0)
    expand_node(tree, ROOT_ID, policy)
    with pytest.raises(ValueError):
        expand_node(tree, ROOT_ID, policy)
    terminal = tree.add_child("0.0", Thought.parse("The final answer is: Ridley Scott"))
    with pytest.raises(ValueError):
        expand_node(tree, terminal, policy)


def test_backpropagate_rejects_non_binary_reward():
    tree = _fixture_tree()
    with pytest.raises(ValueError):
        backpropagate(tree, "0.0", 2)


def _oracle_contains(prediction: str, gold: str) -> bool:
    haystack = normalize_answer(prediction).split()
    needle = normalize_answer(gold).split()
    if not needle:
        return not haystack
    return f" {' '.join(needle)} " in f" {' '.join(haystack)} "


def test_reward_agrees_with_token_containment():
    vocabulary = ["the", "a", "an", "Paris", "paris,", "London", "new", "York", "New-York", "city", "of", "1889",
                  "Scott", "Ridley", "!", "an.", "THE"]
    rng = random.Random(2024)
    for _ in range(1000):
        prediction = " ".join(rng.choice(vocabulary) for _ in range(rng.randint(0, 6)))
        gold = " ".join(rng.choice(vocabulary) for _ in range(rng.randint(1, 3)))
        tree = SearchTree.create(Question("r", "Q?", (gold,)), MctsConfig(), 0)
        leaf = tree.add_child(ROOT_ID, Thought.parse(f"Done. The final answer is: {prediction}"))
        assert terminal_reward(leaf, tree) == int(_oracle_contains(prediction, gold)), (prediction, gold)


ALIEN = Question(id="alien", text="Who directed Alien?", gold_answers=("Ridley Scott",))
ALIEN_CORPUS = [Passage("alien", "Alien", "Alien is a 1979 film directed by Ridley Scott.")]
NEVER_DONE = ("I need more facts.",)


def _canned_policy(thoughts, sub_questions=("Who directed Alien?",), answer="Ridley Scott"):
    """A policy whose model answers every template with fixed completions, cycling by sample index."""
    replies = {"thought": thoughts, "subquestion": sub_questions, "answer_extraction": (answer,)}

    def respond(request, index):
        options = replies[request.prompt_template_id]
        return options[index % len(options)]

    model = ScriptedModel(respond)
    return Policy(Backend(model, NO_RETRY), InMemoryRetriever(ALIEN_CORPUS)), model


def test_expansion_drops_sub_questions_repeated_after_normalization():
    policy, _ = _canned_policy(NEVER_DONE, sub_questions=(
        "Who directed Alien?", "who directed  alien", "When was Alien released?"))
    tree = SearchTree.create(ALIEN, MctsConfig(children_a2=3), 0)
    parent = tree.add_child(ROOT_ID, Thought("I need the director."))
    children = expand_node(tree, parent, policy)
    assert [tree[c].step.sub_question for c in children] == ["Who directed Alien?", "When was Alien released?"]
    assert all(isinstance(tree[c].step, SubQA) for c in children)


def test_expansion_at_the_maximum_depth_is_rejected():
    policy, model = _canned_policy(NEVER_DONE)
    tree = SearchTree.create(ALIEN, MctsConfig(max_depth=2), 0)
    child = tree.add_child(ROOT_ID, Thought("I need the director."))
    assert tree[child].depth == 2
    with pytest.raises(ValueError):
        expand_node(tree, child, policy)
    assert model.calls == 0


def test_playout_stops_at_the_first_terminal_thought():
    policy, _ = _canned_policy(("The final answer is: Ridley Scott",))
    tree = SearchTree.create(ALIEN, MctsConfig(), 0)
    start = tree.add_child(ROOT_ID, Thought("I need the director."))
    end = simulate(tree, start, policy, random.Random(0))
    assert tree[end].is_terminal
    assert tree[end].depth == tree[start].depth + 2
    assert terminal_reward(end, tree) == 1


def test_playout_without_an_answer_stops_at_the_maximum_depth():
    policy, _ = _canned_policy(NEVER_DONE)
    tree = SearchTree.create(ALIEN, MctsConfig(max_depth=5), 0)
    end = simulate(tree, ROOT_ID, policy, random.Random(0))
    assert tree[end].depth == 5
    assert not tree[end].is_terminal
    assert terminal_reward(end, tree) == 0


def test_single_rollout_with_terminal_root_children():
    policy, _ = _canned_policy(("The final answer is: Ridley Scott", "So the final answer is: James Cameron"))
    tree = run_search(ALIEN, MctsConfig(rollouts=1), policy, seed=0)
    assert set(tree.nodes) == {ROOT_ID, "0.0", "0.1"}
    assert all(tree[c].is_terminal for c in tree[ROOT_ID].children)
    assert len(tree.rollouts) == 1
    assert tree[ROOT_ID].visit_count == 1
    assert tree[ROOT_ID].cumulative_reward == tree.rollouts[0].reward


def test_backpropagate_updates_the_whole_path():
    tree = SearchTree.create(ALIEN, MctsConfig(), 0)
    first = tree.add_child(ROOT_ID, thought("I need the director."))
    leaf = tree.add_child(first, subqa("Who directed Alien?", "Ridley Scott", ALIEN_CORPUS[0].text))
    sibling = tree.add_child(ROOT_ID, thought("I need the studio."))
    backpropagate(tree, leaf, 1)
    assert [(tree[n].visit_count, tree[n].cumulative_reward) for n in (ROOT_ID, first, leaf)] == [(1, 1)] * 3
    backpropagate(tree, sibling, 0)
    assert (tree[ROOT_ID].visit_count, tree[ROOT_ID].cumulative_reward) == (2, 1)
    assert (tree[sibling].visit_count, tree[sibling].cumulative_reward) == (1, 0)
    assert (tree[first].visit_count, tree[first].cumulative_reward) == (1, 1)


def test_correct_traces_share_their_common_prefix():
    tree = SearchTree.create(ALIEN, MctsConfig(), 0)
    first = tree.add_child(ROOT_ID, thought("I need the director."))
    hop = tree.add_child(first, subqa("Who directed Alien?", "Ridley Scott", ALIEN_CORPUS[0].text))
    right = tree.add_child(hop, thought("The final answer is: Ridley Scott"))
    wrong = tree.add_child(hop, thought("The final answer is: James Cameron"))
    also_right = tree.add_child(hop, thought("So the final answer is: Sir Ridley Scott"))
    traces = extract_correct_traces(tree)
    assert [t.trace_id for t in traces] == [f"alien:{right}", f"alien:{also_right}"]
    assert traces[0].steps[:2] == traces[1].steps[:2] == (tree[first].step, tree[hop].step)
    assert all(wrong not in t.trace_id for t in traces)


def test_no_correct_terminal_means_no_traces():
    tree = SearchTree.create(ALIEN, MctsConfig(), 0)
    first = tree.add_child(ROOT_ID, thought("I need the director."))
    hop = tree.add_child(first, subqa("Who directed Alien?", "not found"))
    tree.add_child(hop, thought("The final answer is: James Cameron"))
    assert extract_correct_traces(tree) == []


def test_sampling_temperatures_follow_the_action():
    policy, model = _canned_policy(NEVER_DONE)
    run_search(ALIEN, MctsConfig(rollouts=2, max_depth=5), policy, seed=0)
    by_template = {}
    for request in model.requests:
        by_template.setdefault(request.prompt_template_id, set()).add((request.temperature, request.n_samples))
    assert by_template == {"thought": {(0.6, 2)}, "subquestion": {(1.0, 3)}, "answer_extraction": {(0.2, 1)}}
