"""
Monte Carlo Tree Search over reasoning chains for a single question.

The root stands for the question itself. Expanding the root or a sub-question node samples
thoughts; expanding a non-terminal thought samples sub-questions, each of which is answered from
retrieved passages before it becomes a node. Rewards are 1 exactly when a terminal thought's final
answer contains a gold answer.
"""

from dataclasses import dataclass, field
import json
import logging
import math
import random
from typing import Any, Mapping, Sequence

from . import example, operation
from .errors import BackendError, SearchError
from .model import Question, Step, SubQA, Thought, Trace, TraceSource, contains_gold, normalize_answer, step_from_json
from .policy import Policy, extract_subanswer, generate_subquestions, generate_thoughts
from .retrieval import retrieve
from .utils.hashing import canonical_json

logger = logging.getLogger(__name__)

ROOT_ID = "0"


@dataclass(frozen=True, slots=True)
class MctsConfig:
    rollouts: int = 12
    max_depth: int = 12
    children_a1: int = 2
    children_a2: int = 3
    exploration_weight: float = 1.414
    temp_thought: float = 0.6
    temp_subquestion: float = 1.0
    temp_answer: float = 0.2
    top_k: int = 3

    def __post_init__(self) -> None:
        for name in ("rollouts", "max_depth", "children_a1", "children_a2", "top_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("temp_thought", "temp_subquestion", "temp_answer", "exploration_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    def to_json(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any] | None) -> "MctsConfig":
        obj = dict(obj or {})
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown search settings: {', '.join(sorted(unknown))}")
        return cls(**obj)


@dataclass(slots=True)
class TreeNode:
    node_id: str
    parent: str | None
    step: Thought | SubQA
    depth: int
    children: list[str] = field(default_factory=list)
    visit_count: int = 0
    cumulative_reward: int = 0
    expanded: bool = False

    @property
    def is_terminal(self) -> bool:
        return isinstance(self.step, Thought) and self.step.is_terminal

    @property
    def is_root(self) -> bool:
        return self.parent is None

    def to_json(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "parent": self.parent,
            "step": self.step.to_json(),
            "depth": self.depth,
            "children": list(self.children),
            "visit_count": self.visit_count,
            "cumulative_reward": self.cumulative_reward,
            "expanded": self.expanded,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "TreeNode":
        return cls(
            node_id=obj["node_id"],
            parent=obj["parent"],
            step=step_from_json(obj["step"]),
            depth=int(obj["depth"]),
            children=list(obj["children"]),
            visit_count=int(obj["visit_count"]),
            cumulative_reward=int(obj["cumulative_reward"]),
            expanded=bool(obj["expanded"]),
        )


@dataclass(frozen=True, slots=True)
class RolloutRecord:
    index: int
    path: tuple[str, ...]
    leaf: str
    reward: int

    def to_json(self) -> dict[str, Any]:
        return {"index": self.index, "path": list(self.path), "leaf": self.leaf, "reward": self.reward}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RolloutRecord":
        return cls(index=int(obj["index"]), path=tuple(obj["path"]), leaf=obj["leaf"], reward=int(obj["reward"]))


@dataclass(slots=True)
class SearchTree:
    question: Question
    config: MctsConfig
    rng_seed: int
    nodes: dict[str, TreeNode]
    root: str = ROOT_ID
    rollouts: list[RolloutRecord] = field(default_factory=list)

    @classmethod
    def create(cls, question: Question, config: MctsConfig, rng_seed: int) -> "SearchTree":
        root = TreeNode(node_id=ROOT_ID, parent=None, step=Thought(question.text), depth=1)
        return cls(question=question, config=config, rng_seed=rng_seed, nodes={ROOT_ID: root})

    def __getitem__(self, node_id: str) -> TreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"no node {node_id!r} in the tree for {self.question.id}") from None

    def path_to(self, node_id: str) -> list[str]:
        path = []
        current: str | None = node_id
        while current is not None:
            path.append(current)
            current = self[current].parent
        return path[::-1]

    def chain(self, node_id: str) -> list[Step]:
        """The reasoning steps from the root to `node_id`; the root itself is the question, not a step."""
        return [self[n].step for n in self.path_to(node_id)[1:]]

    def add_child(self, parent_id: str, step: Step) -> str:
        parent = self[parent_id]
        child_id = f"{parent_id}.{len(parent.children)}"
        self.nodes[child_id] = TreeNode(node_id=child_id, parent=parent_id, step=step, depth=parent.depth + 1)
        parent.children.append(child_id)
        return child_id


@example(1.0, q=1, n_sa=1, n_s=1, w=1.414)
@example(math.inf, q=0, n_sa=0, n_s=5, w=1.414)
@example(1 + math.sqrt(math.log(8) / 2), q=2, n_sa=2, n_s=8, w=1.0)
@example(raises=ValueError, q=1, n_sa=1, n_s=0, w=1.0)
@example(raises=ValueError, q=3, n_sa=2, n_s=8, w=1.0)
@operation(module="mcts-engine")
def uct_score(q: float, n_sa: int, n_s: int, w: float) -> float:
    """Mean reward plus the exploration bonus; unvisited children score +inf."""
    if n_sa < 0 or q < 0:
        raise ValueError(f"statistics must be non-negative: q={q}, n_sa={n_sa}")
    if n_sa == 0:
        return math.inf
    if n_s == 0:
        raise ValueError(f"a visited child (n_sa={n_sa}) cannot have an unvisited parent")
    if n_s < n_sa or q > n_sa:
        raise ValueError(f"inconsistent statistics: q={q}, n_sa={n_sa}, n_s={n_s}")
    return q / n_sa + w * math.sqrt(math.log(n_s) / n_sa)


def best_child(tree: SearchTree, node_id: str) -> str:
    node = tree[node_id]
    best, best_score = None, -math.inf
    for child_id in node.children:
        child = tree[child_id]
        score = uct_score(child.cumulative_reward, child.visit_count, node.visit_count,
                          tree.config.exploration_weight)
        # strict comparison keeps the earliest child on ties
        if best is None or score > best_score:
            best, best_score = child_id, score
    assert best is not None
    return best


@operation(module="mcts-engine")
def select_path(tree: SearchTree) -> list[str]:
    """Follow the highest-UCT child from the root until reaching an unexpanded or terminal node."""
    path = [tree.root]
    node = tree[tree.root]
    while node.expanded and node.children and not node.is_terminal:
        node = tree[best_child(tree, node.node_id)]
        path.append(node.node_id)
    return path


def _dedup(texts: Sequence[str]) -> list[int]:
    """Indices of the first occurrence of each normalized text."""
    seen: set[str] = set()
    keep = []
    for i, text in enumerate(texts):
        key = normalize_answer(text)
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return keep


def _sample_steps(tree: SearchTree, node: TreeNode, policy: Policy) -> list[Step]:
    config = tree.config
    question = tree.question
    chain = tree.chain(node.node_id)
    if node.is_root or isinstance(node.step, SubQA):
        thoughts = generate_thoughts(question, chain, config.children_a1, config.temp_thought, policy.generator,
                                     templates=policy.templates, max_output_tokens=policy.max_output_tokens)
        return [thoughts[i] for i in _dedup([t.text for t in thoughts])]
    sub_questions = generate_subquestions(question, chain, config.children_a2, config.temp_subquestion,
                                          policy.generator, templates=policy.templates,
                                          max_output_tokens=policy.max_output_tokens)
    steps: list[Step] = []
    for i in _dedup(sub_questions):
        sub_question = sub_questions[i]
        documents = retrieve(sub_question, config.top_k, policy.retriever)
        answer, found = extract_subanswer(question, chain, sub_question, documents, config.temp_answer,
                                          policy.generator, templates=policy.templates,
                                          max_output_tokens=policy.max_output_tokens)
        steps.append(SubQA(sub_question=sub_question, documents=tuple(documents), sub_answer=answer,
                           answer_found=found))
    return steps


@operation(module="mcts-engine")
def expand_node(tree: SearchTree, node_id: str, policy: Policy) -> list[str]:
    """
    Add sampled children to a non-terminal leaf: thoughts under the root or a sub-question node,
    answered sub-questions under a thought. Children whose normalized text repeats an earlier
    sibling are dropped. Nothing is added if any generation or retrieval fails.
    """
    node = tree[node_id]
    if node.is_terminal:
        raise ValueError(f"node {node_id} is terminal")
    if node.expanded:
        raise ValueError(f"node {node_id} is already expanded")
    if node.depth >= tree.config.max_depth:
        raise ValueError(f"node {node_id} is at the maximum depth {tree.config.max_depth}")
    try:
        steps = _sample_steps(tree, node, policy)
    except BackendError as e:
        raise SearchError(str(e), node_id=node_id) from e
    children = [tree.add_child(node_id, step) for step in steps]
    node.expanded = True
    logger.debug("%s: expanded %s into %d children", tree.question.id, node_id, len(children))
    return children


def _is_leaf_of_search(tree: SearchTree, node: TreeNode) -> bool:
    return node.is_terminal or node.depth >= tree.config.max_depth


def _discard_subtrees(tree: SearchTree, expanded: Sequence[str]) -> None:
    for node_id in reversed(expanded):
        node = tree[node_id]
        stack = list(node.children)
        while stack:
            child = tree.nodes.pop(stack.pop())
            stack.extend(child.children)
        node.children.clear()
        node.expanded = False


@operation(module="mcts-engine")
def simulate(tree: SearchTree, node_id: str, policy: Policy, rng: random.Random) -> str:
    """
    Random playout: expand as needed and step to a uniformly chosen child until reaching a terminal
    thought or the maximum depth. Nodes created on the way stay in the tree unless the playout
    fails, in which case the tree is restored to its state at entry.
    """
    current = tree[node_id]
    expanded_here: list[str] = []
    try:
        while not _is_leaf_of_search(tree, current):
            if not current.expanded:
                expand_node(tree, current.node_id, policy)
                expanded_here.append(current.node_id)
            if not current.children:
                raise SearchError("expansion produced no children", node_id=current.node_id)
            current = tree[rng.choice(current.children)]
    except SearchError:
        _discard_subtrees(tree, expanded_here)
        raise
    return current.node_id


@operation(module="mcts-engine")
def terminal_reward(node_id: str, tree: SearchTree) -> int:
    node = tree[node_id]
    if not _is_leaf_of_search(tree, node):
        raise ValueError(f"node {node_id} is neither terminal nor at the maximum depth")
    if node.is_terminal and not node.is_root and contains_gold(node.step.final_answer or "",
                                                              tree.question.gold_answers):
        return 1
    return 0


@operation(module="mcts-engine")
def backpropagate(tree: SearchTree, leaf: str, reward: int) -> None:
    if reward not in (0, 1):
        raise ValueError(f"reward must be 0 or 1, got {reward!r}")
    for node_id in tree.path_to(leaf):
        node = tree[node_id]
        node.visit_count += 1
        node.cumulative_reward += reward


def rollout(tree: SearchTree, policy: Policy, rng: random.Random, index: int) -> RolloutRecord:
    path = select_path(tree)
    leaf = tree[path[-1]]
    entry = leaf
    if not _is_leaf_of_search(tree, leaf) and not leaf.expanded:
        children = expand_node(tree, leaf.node_id, policy)
        if not children:
            raise SearchError("expansion produced no children", node_id=leaf.node_id)
        entry = tree[rng.choice(children)]
    end = simulate(tree, entry.node_id, policy, rng)
    reward = terminal_reward(end, tree)
    backpropagate(tree, end, reward)
    record = RolloutRecord(index=index, path=tuple(tree.path_to(end)), leaf=end, reward=reward)
    tree.rollouts.append(record)
    return record


@operation(module="mcts-engine")
def run_search(question: Question, config: MctsConfig, policy: Policy, seed: int) -> SearchTree:
    """`config.rollouts` iterations of select, expand, simulate, reward and backpropagate."""
    tree = SearchTree.create(question, config, seed)
    rng = random.Random(seed)
    for index in range(config.rollouts):
        try:
            record = rollout(tree, policy, rng, index)
        except SearchError as e:
            raise SearchError(e.message, rollout=index, node_id=e.node_id) from e
        logger.debug("%s: rollout %d reached %s with reward %d", question.id, index, record.leaf, record.reward)
    logger.info("%s: %d rollouts, %d nodes, %d rewarded", question.id, len(tree.rollouts), len(tree.nodes),
                sum(r.reward for r in tree.rollouts))
    return tree


@operation(module="mcts-engine")
def extract_correct_traces(tree: SearchTree) -> list[Trace]:
    """One trace per terminal thought whose final answer is correct, in node creation order."""
    traces = []
    for node_id, node in tree.nodes.items():
        if node.is_root or not node.is_terminal or terminal_reward(node_id, tree) != 1:
            continue
        traces.append(Trace(
            question_id=tree.question.id,
            steps=tuple(tree.chain(node_id)),
            predicted_answer=node.step.final_answer,
            source=TraceSource.MCTS,
            trace_id=f"{tree.question.id}:{node_id}",
        ))
    return traces


def dump_tree(tree: SearchTree) -> str:
    return canonical_json({
        "question": tree.question.to_json(),
        "config": tree.config.to_json(),
        "seed": tree.rng_seed,
        "root": tree.root,
        "nodes": [node.to_json() for node in tree.nodes.values()],
        "rollouts": [r.to_json() for r in tree.rollouts],
    }, indent=2) + "\n"


def load_tree(text: str) -> SearchTree:
    obj = json.loads(text)
    nodes = {n["node_id"]: TreeNode.from_json(n) for n in obj["nodes"]}
    tree = SearchTree(
        question=Question.from_json(obj["question"]),
        config=MctsConfig.from_json(obj["config"]),
        rng_seed=int(obj["seed"]),
        nodes=nodes,
        root=obj["root"],
        rollouts=[RolloutRecord.from_json(r) for r in obj.get("rollouts", ())],
    )
    if tree.root not in nodes or nodes[tree.root].parent is not None:
        raise ValueError(f"tree root {tree.root!r} is missing or has a parent")
    for node in nodes.values():
        for child_id in node.children:
            if child_id not in nodes or nodes[child_id].parent != node.node_id:
                raise ValueError(f"node {node.node_id} lists child {child_id} that does not point back")
            if nodes[child_id].depth != node.depth + 1:
                raise ValueError(f"node {child_id} has depth {nodes[child_id].depth}, expected {node.depth + 1}")
    return tree
