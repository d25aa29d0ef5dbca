"""
测试公共夹具
按已发布的文件格式（vocab.json + merges.txt）写出小型字节级BPE词表，保证加载路径总被测试到
"""

import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import pytest

from app.services.tokenizer_service import bytes_to_unicode, load_tokenizer

# 覆盖 "def foo():\n    pass" 的合并规则，空格记为Ġ、换行记为Ċ
BASE_MERGES: List[Tuple[str, str]] = [
    ("d", "e"), ("de", "f"),
    ("Ġ", "f"), ("o", "o"), ("Ġf", "oo"),
    ("(", ")"), ("()", ":"),
    ("p", "a"), ("s", "s"), ("pa", "ss"), ("Ġ", "pass"),
    ("Ġ", "w"), ("Ġw", "o"), ("Ġwo", "r"), ("Ġwor", "l"), ("Ġworl", "d"),
    ("r", "e"), ("re", "t"), ("ret", "u"), ("retu", "r"), ("retur", "n"),
]

# StarCoder风格额外合并换行后的缩进
INDENT_MERGES: List[Tuple[str, str]] = [("Ċ", "Ġ"), ("ĊĠ", "Ġ"), ("ĊĠĠ", "Ġ")]

INDENTED_DEF_TEXT = "def foo():\n    pass"


def write_tokenizer(directory: Path,
                    merges: Sequence[Tuple[str, str]] = BASE_MERGES,
                    specials: Iterable[str] = ("<|endoftext|>",)) -> Path:
    """写出 vocab.json / merges.txt，返回目录"""
    directory.mkdir(parents=True, exist_ok=True)
    encoder = bytes_to_unicode()
    vocab: Dict[str, int] = {encoder[b]: b for b in range(256)}
    for left, right in merges:
        vocab.setdefault(left + right, len(vocab))
    for special in specials:
        vocab[special] = len(vocab)

    (directory / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False), encoding="utf-8")
    lines = ["#version: 0.2"] + [f"{left} {right}" for left, right in merges]
    (directory / "merges.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


@pytest.fixture
def toy_tokenizer_dir(tmp_path) -> Path:
    return write_tokenizer(tmp_path / "gpt2_toy")


@pytest.fixture
def toy_spec(toy_tokenizer_dir):
    return load_tokenizer(toy_tokenizer_dir, style="gpt2")


@pytest.fixture
def starcoder_spec(tmp_path):
    directory = write_tokenizer(tmp_path / "starcoder_toy", merges=BASE_MERGES + INDENT_MERGES,
                                specials=("<|endoftext|>", "<fim_prefix>"))
    return load_tokenizer(directory)


@pytest.fixture
def byte_spec(tmp_path):
    """只有单字节token的词表"""
    return load_tokenizer(write_tokenizer(tmp_path / "bytes", merges=[], specials=()))


def write_project(root: Path, files: Dict[str, str]) -> Path:
    for relative, content in files.items():
        path = root / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    return root


HELPER_SOURCE = '''import os


def load_settings(path):
    with open(path) as handle:
        data = handle.read()
    return parse_settings(data)


def parse_settings(data):
    result = {}
    for line in data.splitlines():
        key, value = line.split("=", 1)
        result[key.strip()] = value.strip()
    return result
'''


@pytest.fixture
def sample_project(tmp_path) -> Path:
    return write_project(tmp_path / "project", {
        "pkg/helpers.py": HELPER_SOURCE,
        "pkg/main.py": "from pkg.helpers import load_settings\n\nsettings = load_settings('app.cfg')\nprint(settings)\n",
        "README.md": "not indexed\n",
        ".hidden/skip.py": "print('hidden')\n",
    })


def published_vocab_dir(env_name: str) -> Path:
    value = os.environ.get(env_name)
    if not value or not Path(value).exists():
        pytest.skip(f"需要设置 {env_name} 指向已发布的词表目录")
    return Path(value)


CALC_SOURCE = "def total(items):\n    s = 0\n    for x in items:\n        s += x\n    return s\n"
UTIL_SOURCE = "LIMIT = 42\nNAMES = ['A', 'B']\n"
MAIN_SOURCE = 'import os\n\ndef load(path):\n    return open(path).read()\n\ndata = load("x")\n'

EVAL_EXAMPLES = [
    {"example_id": "alpha-loop", "project_id": "alpha", "file_path": "calc.py", "line_number": 4,
     "target": "        s += x"},
    {"example_id": "alpha-return", "project_id": "alpha", "file_path": "calc.py", "line_number": 5,
     "target": "    return s"},
    {"example_id": "beta-load", "project_id": "beta", "file_path": "main.py", "line_number": 6,
     "target": 'data = load("x")'},
]


def write_dataset(root: Path,
                  projects: Dict[str, Dict[str, str]],
                  examples: Sequence[Dict],
                  overlap: Iterable[str] = ()) -> Path:
    """写出评测数据集：每个项目一个源码目录 + manifest.json + examples.jsonl"""
    flagged = set(overlap)
    for project_id, files in projects.items():
        write_project(root / project_id, files)
    manifest = {"projects": [
        {"id": project_id, "root": project_id, "overlap_flag": project_id in flagged} for project_id in projects
    ]}
    (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    (root / "examples.jsonl").write_text("\n".join(json.dumps(e) for e in examples) + "\n", encoding="utf-8")
    return root


def write_eval_dataset(root: Path, examples: Sequence[Dict] = EVAL_EXAMPLES, beta_overlap: bool = True) -> Path:
    """两个项目的小型评测数据集"""
    projects = {"alpha": {"calc.py": CALC_SOURCE, "util.py": UTIL_SOURCE}, "beta": {"main.py": MAIN_SOURCE}}
    return write_dataset(root, projects, examples, overlap=["beta"] if beta_overlap else [])


@pytest.fixture
def eval_dataset_dir(tmp_path) -> Path:
    return write_eval_dataset(tmp_path / "toyeval")
