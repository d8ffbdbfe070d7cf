"""Answer synthesis: prompt templates, four synthesis modes, two-step reasoning.

Every rendered prompt is budgeted against the generator's context window using
the whitespace token counter; context text is truncated (never the query) when
a single prompt cannot fit.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum

from .providers import ChatRequest, ProviderExchange
from .retrieval import RankedList
from .textproc import count_tokens

REFUSAL_PHRASE = "I'm sorry, I do not have information on this"

ANSWERABLE_TOKEN = "ANSWERABLE"
INSUFFICIENT_TOKEN = "INSUFFICIENT"

_SLOT = re.compile(r"\{([a-z_]+)\}")

DEFAULT_QA_TEMPLATE = """\
Context information is below.
---------------------
{context_str}
---------------------
Given the context information and no prior knowledge, answer the question:
{query_str}
"""

DEFAULT_BRIEF_ANSWER_TEMPLATE = """\
Context information is below.
---------------------
{context_str}
---------------------
Given the context information and no prior knowledge, provide a brief, shortest \
possible answer, ideally just one word, for the following question:
{query_str}
"""

DEFAULT_REFINE_TEMPLATE = """\
We have the opportunity to refine the original answer (only if needed) with some \
more context below.
---------------------
{context_msg}
---------------------
Given the new context, refine the original answer to better answer the question:
{query_str}
If the context isn't proper, output the original answer again.
Original Answer: {existing_answer}
"""

DEFAULT_ANSWERABILITY_TEMPLATE = """\
Context information is below.
---------------------
{context_str}
---------------------
Decide whether the context contains enough information to answer the question:
{query_str}
Reply with exactly one word on the first line: ANSWERABLE if the context suffices, \
INSUFFICIENT if it does not.
"""

DEFAULT_HYDE_TEMPLATE = """\
Write a short passage that plausibly answers the following question. \
Output only the passage.
Question: {query_str}
"""

DEFAULT_STEPBACK_TEMPLATE = """\
Rewrite the following question as a broader, more general question about the \
underlying topic. Output only the rewritten question.
Question: {query_str}
"""

DEFAULT_REWRITE_TEMPLATE = """\
Rewrite the following question to be more explicit and detailed, making any \
implied information visible. Output only the rewritten question.
Question: {query_str}
"""

DEFAULT_DECOMPOSE_TEMPLATE = """\
Break the following question into simpler sub-questions that can be answered \
independently. Output them as a numbered list, one per line.
Question: {query_str}
"""

_TEMPLATE_SLOTS = {
    "qa_template": ("context_str", "query_str"),
    "brief_answer_template": ("context_str", "query_str"),
    "refine_template": ("context_msg", "query_str", "existing_answer"),
    "answerability_template": ("context_str", "query_str"),
    "hyde_template": ("query_str",),
    "stepback_template": ("query_str",),
    "rewrite_template": ("query_str",),
    "decompose_template": ("query_str",),
}


class TemplateError(ValueError):
    pass


@dataclass
class TemplateSet:
    """The versioned prompt family used by generation, transforms, and judges."""

    qa_template: str = DEFAULT_QA_TEMPLATE
    brief_answer_template: str = DEFAULT_BRIEF_ANSWER_TEMPLATE
    refine_template: str = DEFAULT_REFINE_TEMPLATE
    answerability_template: str = DEFAULT_ANSWERABILITY_TEMPLATE
    hyde_template: str = DEFAULT_HYDE_TEMPLATE
    stepback_template: str = DEFAULT_STEPBACK_TEMPLATE
    rewrite_template: str = DEFAULT_REWRITE_TEMPLATE
    decompose_template: str = DEFAULT_DECOMPOSE_TEMPLATE
    few_shot_exemplars: list[tuple[str, str, str]] = field(default_factory=list)
    judge_templates: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, declared in _TEMPLATE_SLOTS.items():
            body = getattr(self, name)
            found = _SLOT.findall(body)
            for slot in declared:
                if found.count(slot) != 1:
                    raise TemplateError(
                        f"{name}: slot {{{slot}}} must appear exactly once "
                        f"(found {found.count(slot)})"
                    )
            extras = [s for s in found if s not in declared]
            if extras:
                raise TemplateError(f"{name}: unknown slots {sorted(set(extras))}")

    def version(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(_TEMPLATE_SLOTS):
            digest.update(getattr(self, name).encode("utf-8"))
            digest.update(b"\x00")
        for q, r, a in self.few_shot_exemplars:
            digest.update(f"{q}\x00{r}\x00{a}\x00".encode("utf-8"))
        for key in sorted(self.judge_templates):
            digest.update(f"{key}\x00{self.judge_templates[key]}\x00".encode("utf-8"))
        return digest.hexdigest()[:16]


def render(template: str, **slots: str) -> str:
    out = template
    for name, value in slots.items():
        out = out.replace("{" + name + "}", value)
    return out


def parse_template_file(text: str) -> TemplateSet:
    """Parse the sectioned template file: ``[name]`` headers, bodies until the next.

    ``[few_shot_exemplar]`` sections repeat and carry ``question:``/``reasoning:``/
    ``answer:`` lines; ``[judge:<metric-id>]`` sections override judge prompts.
    """
    sections: list[tuple[str, str]] = []
    name = None
    body: list[str] = []
    for line in text.splitlines():
        m = re.match(r"^\[([A-Za-z0-9_:+-]+)\]\s*$", line)
        if m:
            if name is not None:
                sections.append((name, "\n".join(body).strip("\n") + "\n"))
            name = m.group(1)
            body = []
        elif name is not None:
            body.append(line)
    if name is not None:
        sections.append((name, "\n".join(body).strip("\n") + "\n"))

    kwargs: dict = {}
    exemplars: list[tuple[str, str, str]] = []
    judges: dict[str, str] = {}
    for sec_name, sec_body in sections:
        if sec_name == "few_shot_exemplar":
            fields = {}
            for line in sec_body.splitlines():
                for key in ("question", "reasoning", "answer"):
                    if line.lower().startswith(key + ":"):
                        fields[key] = line[len(key) + 1 :].strip()
            if set(fields) != {"question", "reasoning", "answer"}:
                raise TemplateError("few_shot_exemplar needs question/reasoning/answer lines")
            exemplars.append((fields["question"], fields["reasoning"], fields["answer"]))
        elif sec_name.startswith("judge:"):
            judges[sec_name[len("judge:"):]] = sec_body
        elif sec_name in _TEMPLATE_SLOTS:
            kwargs[sec_name] = sec_body
        else:
            raise TemplateError(f"unknown template section [{sec_name}]")
    return TemplateSet(few_shot_exemplars=exemplars, judge_templates=judges, **kwargs)


def load_templates(path) -> TemplateSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_template_file(fh.read())


class SynthesisMode(str, Enum):
    SIMPLE_SUMMARIZE = "simple_summarize"
    REFINE = "refine"
    COMPACT = "compact"
    COMPACT_ACCUMULATE = "compact_accumulate"


@dataclass
class GenerationResult:
    answer: str
    refused: bool = False
    failed: bool = False
    exchanges: list[ProviderExchange] = field(default_factory=list)
    mode: str = ""
    template_version: str = ""


def _truncate_tokens(text: str, max_tok: int) -> str:
    tokens = text.split()
    if len(tokens) <= max_tok:
        return text
    return " ".join(tokens[: max(max_tok, 0)])


def _fit_prompt(build, context_text: str, budget: int) -> str:
    """Shrink context_text until build(context_text) fits the token budget."""
    prompt = build(context_text)
    while count_tokens(prompt) > budget:
        excess = count_tokens(prompt) - budget
        new_len = count_tokens(context_text) - excess
        if new_len <= 0:
            context_text = ""
            prompt = build(context_text)
            break
        context_text = _truncate_tokens(context_text, new_len)
        prompt = build(context_text)
    return prompt


def _context_texts(contexts) -> list[str]:
    if isinstance(contexts, RankedList):
        return contexts.texts()
    return list(contexts)


def _complete(llm, prompt: str, max_tokens: int, context_window: int) -> ProviderExchange:
    req = ChatRequest(messages=(("user", prompt),), max_tokens=max_tokens,
                      context_window=context_window)
    return llm.complete(req)


def pack_blocks(texts: list[str], qa_body: str, query: str,
                max_tokens: int, context_window: int) -> list[list[str]]:
    """Greedy first-fit packing of contexts into window-sized blocks, order kept."""
    budget = context_window - max_tokens
    blocks: list[list[str]] = []
    current: list[str] = []
    for text in texts:
        candidate = current + [text]
        prompt = render(qa_body, context_str="\n\n".join(candidate), query_str=query)
        if current and count_tokens(prompt) > budget:
            blocks.append(current)
            current = [text]
        else:
            current = candidate
    if current:
        blocks.append(current)
    return blocks


def synthesize(mode: SynthesisMode, query: str, contexts, llm, templates: TemplateSet,
               *, brief: bool = False, few_shot: bool = False,
               max_tokens: int = 1024, context_window: int = 4096) -> GenerationResult:
    """Generate an answer from retrieved contexts under the chosen synthesis mode.

    Call counts are part of the contract: simple_summarize makes exactly one
    call; refine makes one per context, chaining the previous answer; the
    compact modes make one call per greedily packed block.
    """
    texts = _context_texts(contexts)
    if not texts:
        raise ValueError("synthesize requires at least one context")
    mode = SynthesisMode(mode)
    qa_body = templates.brief_answer_template if brief else templates.qa_template
    budget = context_window - max_tokens
    exchanges: list[ProviderExchange] = []

    def qa_call(context_text: str) -> ProviderExchange:
        if few_shot:
            prompt = assemble_few_shot(templates, query, [context_text], brief=brief,
                                       max_tokens=max_tokens, context_window=context_window)
        else:
            prompt = _fit_prompt(
                lambda ctx: render(qa_body, context_str=ctx, query_str=query),
                context_text, budget,
            )
        ex = _complete(llm, prompt, max_tokens, context_window)
        exchanges.append(ex)
        return ex

    def refine_call(context_text: str, existing: str) -> ProviderExchange:
        prompt = _fit_prompt(
            lambda ctx: render(templates.refine_template, context_msg=ctx,
                               query_str=query, existing_answer=existing),
            context_text, budget,
        )
        ex = _complete(llm, prompt, max_tokens, context_window)
        exchanges.append(ex)
        return ex

    if mode is SynthesisMode.SIMPLE_SUMMARIZE:
        ex = qa_call("\n\n".join(texts))
        answer = ex.response_text if ex.success else ""
    elif mode is SynthesisMode.REFINE:
        answer = ""
        have_answer = False
        for i, text in enumerate(texts):
            if i == 0:
                ex = qa_call(text)
            else:
                ex = refine_call(text, answer)
            if ex.success:
                answer = ex.response_text
                have_answer = True
        if not have_answer:
            answer = ""
    else:
        blocks = pack_blocks(texts, qa_body, query, max_tokens, context_window)
        if mode is SynthesisMode.COMPACT:
            answer = ""
            have_answer = False
            for i, block in enumerate(blocks):
                joined = "\n\n".join(block)
                ex = qa_call(joined) if i == 0 else refine_call(joined, answer)
                if ex.success:
                    answer = ex.response_text
                    have_answer = True
            if not have_answer:
                answer = ""
        else:  # COMPACT_ACCUMULATE
            parts = []
            for block in blocks:
                ex = qa_call("\n\n".join(block))
                if ex.success:
                    parts.append(ex.response_text)
            answer = "\n".join(parts)

    failed = bool(exchanges) and not any(ex.success for ex in exchanges)
    return GenerationResult(answer=answer, refused=False, failed=failed,
                            exchanges=exchanges, mode=mode.value,
                            template_version=templates.version())


def two_step_answer(query: str, contexts, llm, templates: TemplateSet,
                    *, brief: bool = False, max_tokens: int = 1024,
                    context_window: int = 4096) -> GenerationResult:
    """Answerability gate, then a simple_summarize answer only if it passes.

    The gate reply's first line must be the literal ANSWERABLE token to proceed;
    anything else (including provider failure) refuses without a second call.
    """
    texts = _context_texts(contexts)
    if not texts:
        raise ValueError("two_step_answer requires at least one context")
    budget = context_window - max_tokens
    prompt = _fit_prompt(
        lambda ctx: render(templates.answerability_template, context_str=ctx,
                           query_str=query),
        "\n\n".join(texts), budget,
    )
    gate = _complete(llm, prompt, max_tokens, context_window)
    if not gate.success:
        return GenerationResult(answer=REFUSAL_PHRASE, refused=True, failed=True,
                                exchanges=[gate], mode="two_step",
                                template_version=templates.version())
    first_line = gate.response_text.strip().splitlines()[0].strip() \
        if gate.response_text.strip() else ""
    if first_line != ANSWERABLE_TOKEN:
        return GenerationResult(answer=REFUSAL_PHRASE, refused=True,
                                exchanges=[gate], mode="two_step",
                                template_version=templates.version())
    result = synthesize(SynthesisMode.SIMPLE_SUMMARIZE, query, texts, llm, templates,
                        brief=brief, max_tokens=max_tokens, context_window=context_window)
    return GenerationResult(answer=result.answer, refused=False, failed=result.failed,
                            exchanges=[gate] + result.exchanges, mode="two_step",
                            template_version=templates.version())


def assemble_few_shot(templates: TemplateSet, query: str, contexts,
                      *, brief: bool = False, max_tokens: int = 1024,
                      context_window: int = 4096) -> str:
    """Prepend worked exemplars to the QA prompt, dropping trailing ones on overflow."""
    texts = _context_texts(contexts)
    qa_body = templates.brief_answer_template if brief else templates.qa_template
    budget = context_window - max_tokens
    context_text = "\n\n".join(texts)

    def build(n_exemplars: int, ctx: str) -> str:
        parts = [
            f"Question: {q}\n{r}\nAnswer: {a}"
            for q, r, a in templates.few_shot_exemplars[:n_exemplars]
        ]
        parts.append(render(qa_body, context_str=ctx, query_str=query))
        return "\n\n".join(parts)

    n = len(templates.few_shot_exemplars)
    while n > 0 and count_tokens(build(n, context_text)) > budget:
        n -= 1
    return _fit_prompt(lambda ctx: build(n, ctx), context_text, budget)
