"""Instruction data: JSONL ingestion, Alpaca rendering, byte-level tokens."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import random
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import IGNORE, next_token_targets

log = logging.getLogger(__name__)

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

ALPACA_TEMPLATE = (
    "Below is an instruction that describes a task, paired with an input that provides further context. "
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n{instruction}\n\n"
    "### Input:\n{input}\n\n"
    "### Response:\n"
)
RESPONSE_MARKER = b"### Response:\n"
INPUT_MARKER = b"### Input:\n"


@dataclass(frozen=True)
class InstructionRecord:
    instruction: str
    input: str
    output: str
    id: str

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("instruction is empty")
        if not self.output.strip():
            raise ValueError("output is empty")


@dataclass
class EncodedInstance:
    ids: np.ndarray
    response_start: int
    id: str
    truncated_from: int | None = None

    @property
    def n(self) -> int:
        return len(self.ids)


@dataclass
class Corpus:
    records: list[InstructionRecord]
    errors: list[tuple[int, str]] = field(default_factory=list)
    checksum: str = ""

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def render_prompt(record: InstructionRecord) -> str:
    return ALPACA_TEMPLATE.format(instruction=record.instruction, input=record.input)


def render_alpaca(record: InstructionRecord) -> str:
    """The template with the record substituted, followed by the output text."""
    return render_prompt(record) + record.output


def tokenize(text: str | bytes) -> list[int]:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return [BOS, *raw, EOS]


def detokenize(ids, encoding: str | None = "utf-8") -> str | bytes:
    """Inverse of :func:`tokenize`; special ids are dropped.  ``encoding=None`` returns bytes."""
    raw = bytes(int(i) for i in ids if int(i) < 256)
    return raw if encoding is None else raw.decode(encoding)


def load_jsonl(path) -> Corpus:
    """One record per valid line, in file order; malformed lines are reported, not fatal."""
    with open(path, "rb") as fh:
        blob = fh.read()
    records, errors, seen = [], [], set()
    for lineno, line in enumerate(blob.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("line is not a JSON object")
            for key in ("instruction", "output"):
                if not isinstance(obj.get(key), str):
                    raise ValueError(f"missing or non-string field {key!r}")
            rid = str(obj.get("id", f"line{lineno}"))
            if rid in seen:
                raise ValueError(f"duplicate id {rid!r}")
            rec = InstructionRecord(obj["instruction"], str(obj.get("input", "") or ""), obj["output"], rid)
        except ValueError as exc:  # JSONDecodeError is a ValueError
            errors.append((lineno, str(exc)))
            log.warning("%s:%d skipped: %s", path, lineno, exc)
            continue
        seen.add(rid)
        records.append(rec)
    return Corpus(records, errors, hashlib.sha256(blob).hexdigest())


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "instruction": r.instruction, "input": r.input,
                                 "output": r.output}, ensure_ascii=False) + "\n")


def encode(record: InstructionRecord, max_seq: int | None = None) -> EncodedInstance:
    """Render and tokenize; over-long instances lose prompt bytes from the left (after BOS)."""
    prompt = render_prompt(record).encode("utf-8")
    response = record.output.encode("utf-8")
    ids = [BOS, *prompt, *response, EOS]
    start = 1 + len(prompt)
    truncated = None
    if max_seq is not None and len(ids) > max_seq:
        excess = len(ids) - max_seq
        if excess > len(prompt):
            raise ValueError(f"instance {record.id!r}: response alone exceeds max_seq={max_seq}")
        truncated = len(ids)
        ids = [BOS] + ids[1 + excess:]
        start -= excess
    return EncodedInstance(np.asarray(ids, dtype=np.int64), start, record.id, truncated)


def encode_corpus(corpus, max_seq: int | None = None) -> list[EncodedInstance]:
    return [encode(r, max_seq) for r in corpus]


def truncate(inst: EncodedInstance, max_seq: int) -> EncodedInstance:
    """Left-truncate the prompt of an already encoded instance."""
    if inst.n <= max_seq:
        return inst
    excess = inst.n - max_seq
    if excess > inst.response_start - 1:
        raise ValueError(f"instance {inst.id!r}: response alone exceeds max_seq={max_seq}")
    ids = np.concatenate([inst.ids[:1], inst.ids[1 + excess:]])
    return EncodedInstance(ids, inst.response_start - excess, inst.id, inst.truncated_from or inst.n)


def _find(hay: bytes, needle: bytes, start: int = 0) -> int:
    return hay.find(needle, start)


def response_boundary(inst: EncodedInstance | np.ndarray) -> int:
    """Index of the first token after the ``### Response:`` marker line.

    The search starts after the input section marker when it is present, so
    instruction text cannot shadow the template's marker.  Input text that
    itself contains the marker is ambiguous; use ``response_start`` from
    :func:`encode` when the record is at hand.
    """
    ids = inst.ids if isinstance(inst, EncodedInstance) else np.asarray(inst)
    # map ids to bytes one-to-one; specials become 0xFF placeholders that cannot match
    hay = bytes(int(i) if int(i) < 256 else 0xFF for i in ids)
    begin = _find(hay, INPUT_MARKER)
    pos = _find(hay, RESPONSE_MARKER, max(begin, 0))
    if pos < 0:
        raise ValueError("response marker not found: instance is not Alpaca-rendered")
    return pos + len(RESPONSE_MARKER)


LOSS_REGIONS = ("all", "response")


def instance_targets(inst: EncodedInstance, loss_on: str = "all") -> np.ndarray:
    """Next-token targets; with ``loss_on="response"`` only response tokens are predicted."""
    if loss_on not in LOSS_REGIONS:
        raise ValueError(f"loss_on must be one of {LOSS_REGIONS}")
    t = next_token_targets(inst.ids)
    if loss_on == "response":
        t[: max(response_boundary(inst) - 1, 0)] = IGNORE
    return t


# ---------------------------------------------------------------------------
# encoded-corpus cache file

_ENC_MAGIC = b"TSEEKENC"
_ENC_VERSION = 1


def save_encoded(path, instances: list[EncodedInstance], source_checksum: str) -> None:
    buf = io.BytesIO()
    buf.write(_ENC_MAGIC)
    buf.write(struct.pack("<I", _ENC_VERSION))
    buf.write(bytes.fromhex(source_checksum))
    buf.write(struct.pack("<Q", len(instances)))
    for inst in instances:
        raw = inst.id.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<qqq", inst.n, inst.response_start, inst.truncated_from or -1))
        buf.write(np.asarray(inst.ids, dtype="<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_encoded(path, source_checksum: str | None = None) -> list[EncodedInstance]:
    """Load an encoded corpus; with ``source_checksum`` a stale cache is rejected."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _ENC_MAGIC:
        raise ValueError("not an encoded-corpus file")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != _ENC_VERSION:
        raise ValueError(f"unsupported encoded-corpus version {version}")
    stored = blob[12:44].hex()
    if source_checksum is not None and stored != source_checksum:
        raise ValueError("encoded corpus is stale: source checksum differs")
    (count,) = struct.unpack_from("<Q", blob, 44)
    off, out = 52, []
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        rid = blob[off:off + ln].decode()
        off += ln
        n, start, trunc = struct.unpack_from("<qqq", blob, off)
        off += 24
        ids = np.frombuffer(blob, "<u2", n, off).astype(np.int64)
        off += 2 * n
        out.append(EncodedInstance(ids, int(start), rid, None if trunc < 0 else int(trunc)))
    return out


# ---------------------------------------------------------------------------
# toy instruction tasks

_LETTERS = "abcdefghij"


def toy_records(task: str, count: int, seed: int = 0, *, min_len: int = 3, max_len: int = 6,
                prefix: str = "") -> list[InstructionRecord]:
    """Small synthetic tasks rendered through the instruction template.

    ``reverse``: reverse a letter string; ``copy``: repeat it; ``sort``: sort
    its letters; ``add``: add two small integers.
    """
    rng = random.Random(f"{task}:{seed}")
    out = []
    for i in range(count):
        word = "".join(rng.choice(_LETTERS) for _ in range(rng.randint(min_len, max_len)))
        if task == "reverse":
            rec = ("Reverse the letters.", word, word[::-1])
        elif task == "copy":
            rec = ("Repeat the letters.", word, word)
        elif task == "sort":
            rec = ("Sort the letters.", word, "".join(sorted(word)))
        elif task == "add":
            a, b = rng.randint(0, 49), rng.randint(0, 49)
            rec = ("Add the numbers.", f"{a}+{b}", str(a + b))
        else:
            raise ValueError(f"unknown toy task {task!r}")
        out.append(InstructionRecord(rec[0], rec[1], rec[2], f"{prefix}{task}-{seed}-{i}"))
    return out
