import random

import pytest

from ragmark.generation import (ANSWERABLE_TOKEN, REFUSAL_PHRASE, GenerationResult,
                                SynthesisMode, TemplateError, TemplateSet,
                                assemble_few_shot, load_templates, pack_blocks,
                                parse_template_file, render, synthesize,
                                two_step_answer)
from ragmark.providers import StubChatProvider
from ragmark.textproc import count_tokens

TEMPLATES = TemplateSet()


class RecordingChat(StubChatProvider):
    """Stub that keeps every prompt it saw."""

    def __init__(self, reply="ANS", **kwargs):
        super().__init__(reply=reply, **kwargs)
        self.prompts = []

    def complete(self, req):
        self.prompts.append(req.messages[-1][1])
        return super().complete(req)


def test_template_slot_validation():
    with pytest.raises(TemplateError):
        TemplateSet(qa_template="no slots at all")
    with pytest.raises(TemplateError):
        TemplateSet(qa_template="{context_str} {query_str} {query_str}")
    with pytest.raises(TemplateError):
        TemplateSet(qa_template="{context_str} {query_str} {mystery_slot}")


def test_render_fills_slots():
    out = render("A {x} B {y}", x="1", y="2")
    assert out == "A 1 B 2"


def test_template_file_roundtrip(tmp_path):
    body = """\
[qa_template]
Custom context: {context_str}
Question: {query_str}

[few_shot_exemplar]
question: What is 1+1?
reasoning: Adding one and one.
answer: 2

[few_shot_exemplar]
question: Capital of France?
reasoning: Geography fact.
answer: Paris

[judge:Up-CRel]
Judge this: {question} given {retrieval_context}. SCORE: line required.
"""
    path = tmp_path / "templates.txt"
    path.write_text(body, encoding="utf-8")
    templates = load_templates(path)
    assert "Custom context" in templates.qa_template
    assert templates.few_shot_exemplars == [
        ("What is 1+1?", "Adding one and one.", "2"),
        ("Capital of France?", "Geography fact.", "Paris"),
    ]
    assert "Up-CRel" in templates.judge_templates
    assert templates.version() != TemplateSet().version()


def test_template_file_unknown_section():
    with pytest.raises(TemplateError):
        parse_template_file("[mystery_section]\nbody\n")


def test_simple_summarize_always_one_call():
    for n_contexts in (1, 2, 5):
        chat = RecordingChat()
        contexts = [f"context number {i}" for i in range(n_contexts)]
        result = synthesize(SynthesisMode.SIMPLE_SUMMARIZE, "q?", contexts, chat,
                            TEMPLATES)
        assert chat.calls == 1
        assert len(result.exchanges) == 1
        for ctx in contexts:
            assert ctx in chat.prompts[0]


def test_refine_one_call_per_context_and_chains_answers():
    chat = RecordingChat(reply=["first answer", "second answer", "third answer"])
    contexts = ["ctx one", "ctx two", "ctx three"]
    result = synthesize(SynthesisMode.REFINE, "q?", contexts, chat, TEMPLATES)
    assert chat.calls == 3
    assert "first answer" in chat.prompts[1]
    assert "second answer" in chat.prompts[2]
    assert result.answer == "third answer"
    assert "ctx two" in chat.prompts[1]


def test_compact_small_contexts_single_block():
    chat = RecordingChat()
    contexts = [" ".join(["tok"] * 100) for _ in range(3)]
    result = synthesize(SynthesisMode.COMPACT, "q?", contexts, chat, TEMPLATES,
                        max_tokens=1024, context_window=4096)
    assert chat.calls == 1
    assert result.mode == "compact"


def test_compact_accumulate_joins_block_answers():
    # Force two blocks: each context ~1700 tokens, window 4096, max_tokens 1024.
    chat = RecordingChat(reply=["part a", "part b"])
    contexts = [" ".join([f"w{i}"] * 1700) for i in range(2)]
    result = synthesize(SynthesisMode.COMPACT_ACCUMULATE, "q?", contexts, chat,
                        TEMPLATES, max_tokens=1024, context_window=4096)
    assert chat.calls == 2
    assert result.answer == "part a\npart b"


def test_pack_blocks_matches_greedy_oracle():
    rng = random.Random(2)
    qa = TEMPLATES.qa_template
    for _ in range(20):
        n = rng.randint(1, 8)
        sizes = [rng.randint(50, 2200) for _ in range(n)]
        contexts = [" ".join([f"t{i}"] * size) for i, size in enumerate(sizes)]
        max_tokens = 512
        window = 4096
        blocks = pack_blocks(contexts, qa, "the query?", max_tokens, window)
        # Independent greedy recomputation.
        budget = window - max_tokens
        expected = []
        current = []
        for ctx in contexts:
            trial = current + [ctx]
            prompt = qa.replace("{context_str}", "\n\n".join(trial)) \
                       .replace("{query_str}", "the query?")
            if current and count_tokens(prompt) > budget:
                expected.append(current)
                current = [ctx]
            else:
                current = trial
        if current:
            expected.append(current)
        assert blocks == expected
        assert [c for b in blocks for c in b] == contexts  # order preserved

        chat = RecordingChat()
        synthesize(SynthesisMode.COMPACT_ACCUMULATE, "the query?", contexts, chat,
                   TEMPLATES, max_tokens=max_tokens, context_window=window)
        assert chat.calls == len(expected)


def test_prompts_never_exceed_window():
    chat = RecordingChat()
    huge = " ".join(["x"] * 9000)
    synthesize(SynthesisMode.SIMPLE_SUMMARIZE, "q?", [huge], chat, TEMPLATES,
               max_tokens=1024, context_window=4096)
    assert count_tokens(chat.prompts[0]) <= 4096 - 1024


def test_all_calls_failed_yields_failure_not_refusal():
    chat = StubChatProvider(fail_always=True)
    result = synthesize(SynthesisMode.REFINE, "q?", ["a", "b"], chat, TEMPLATES)
    assert result.failed and not result.refused
    assert result.answer == ""
    assert len(result.exchanges) == 2


def test_two_step_insufficient_refuses_with_one_call():
    chat = RecordingChat(reply="INSUFFICIENT")
    result = two_step_answer("q?", ["ctx"], chat, TEMPLATES)
    assert result.refused
    assert chat.calls == 1
    assert result.answer == REFUSAL_PHRASE


def test_two_step_answerable_then_answer():
    chat = RecordingChat(reply=[ANSWERABLE_TOKEN, "42"])
    result = two_step_answer("q?", ["ctx"], chat, TEMPLATES)
    assert not result.refused
    assert result.answer == "42"
    assert chat.calls == 2


def test_two_step_gate_failure_flags():
    chat = StubChatProvider(fail_always=True)
    result = two_step_answer("q?", ["ctx"], chat, TEMPLATES)
    assert result.refused and result.failed
    assert len(result.exchanges) == 1


def test_two_step_requires_first_line_token():
    chat = RecordingChat(reply="Probably ANSWERABLE I think")
    result = two_step_answer("q?", ["ctx"], chat, TEMPLATES)
    assert result.refused  # token must be the whole first line


def test_few_shot_exemplars_in_order_before_context():
    templates = TemplateSet(few_shot_exemplars=[
        ("Q1?", "R1.", "A1"), ("Q2?", "R2.", "A2"),
    ])
    prompt = assemble_few_shot(templates, "actual?", ["the context"])
    i1 = prompt.index("Q1?")
    i2 = prompt.index("Q2?")
    ic = prompt.index("Context information is below.")
    assert i1 < i2 < ic
    assert "the context" in prompt


def test_few_shot_overflow_drops_trailing_exemplars_first():
    big = " ".join(["pad"] * 1600)  # two exemplars exceed the 3072-token budget
    templates = TemplateSet(few_shot_exemplars=[
        ("keep me?", big, "A1"), ("drop me?", big, "A2"),
    ])
    prompt = assemble_few_shot(templates, "actual?", ["ctx"], max_tokens=1024,
                               context_window=4096)
    assert "keep me?" in prompt
    assert "drop me?" not in prompt
    assert "ctx" in prompt and "actual?" in prompt


def test_few_shot_disabled_is_plain_render():
    templates = TemplateSet()
    prompt = assemble_few_shot(templates, "q?", ["ctx"])
    plain = render(templates.qa_template, context_str="ctx", query_str="q?")
    assert prompt == plain


def test_synthesize_deterministic_with_stub():
    def reply(messages):
        return f"reply to {len(messages[-1]['content'])} chars"

    contexts = ["alpha beta", "gamma delta", "epsilon"]
    first = synthesize(SynthesisMode.REFINE, "q?", contexts,
                       StubChatProvider(reply=reply), TEMPLATES)
    second = synthesize(SynthesisMode.REFINE, "q?", contexts,
                        StubChatProvider(reply=reply), TEMPLATES)
    assert first.answer == second.answer
    assert first.template_version == second.template_version


def test_generation_result_invariants():
    result = GenerationResult(answer="x", refused=False)
    assert not result.exchanges
