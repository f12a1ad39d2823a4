"""Line-oriented text serialization for graphs.

Format sketch::

    var w = f64[2]{0.5,1.5}
    %0 = constant[value=i64[]{4}]()
    %1 = placeholder[dtype=f64, name="x", shape=[4,?]]()
    %2 = parfor(%0, %1) {
      body {
        %0 = loop_var()
        %1 = capture[dtype=f64, index=0, shape=[4,?]]()
        %2 = gather_rows(%1, %0)
        outputs(%2)
      }
    }
    outputs(%2)

Node ids are local to their graph; references may point only backward.
`dumps` / `loads` round-trip exactly: serializing a parsed graph reproduces
the input text, and floating-point payloads use shortest round-trip reprs.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import ParseError
from .graph import Block, Graph, Ref
from .tensor import DType, TensorValue

_SUB_ORDER = {"parfor": ["body"], "cond": ["then", "else"], "while": ["cond", "body"]}


# --------------------------------------------------------------------------
# writing


def _fmt_float(x: float) -> str:
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = repr(float(x))
    return s


def _fmt_tensor(v: TensorValue) -> str:
    dims = ",".join(str(d) for d in v.shape)
    flat = v.data.reshape(-1)
    if v.dtype == DType.F64:
        items = [_fmt_float(x) for x in flat]
    elif v.dtype == DType.I64:
        items = [str(int(x)) for x in flat]
    else:
        items = ["true" if x else "false" for x in flat]
    return f"{v.dtype.value}[{dims}]{{{','.join(items)}}}"


def _fmt_shape(shape) -> str:
    if shape is None:
        return "none"
    return "[" + ",".join("?" if d is None else str(d) for d in shape) + "]"


def _fmt_attr(v) -> str:
    if isinstance(v, TensorValue):
        return _fmt_tensor(v)
    if isinstance(v, DType):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return _fmt_float(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if v is None or isinstance(v, (tuple, list)):
        return _fmt_shape(v)
    raise TypeError(f"cannot serialize attr {v!r}")


def _fmt_ref(nid: int, port: int) -> str:
    return f"%{nid}" if port == 0 else f"%{nid}:{port}"


def _dump_graph(g: Graph, indent: int, lines: list):
    pad = "  " * indent
    for name in sorted(g.variables):
        lines.append(f"{pad}var {name} = {_fmt_tensor(g.variables[name])}")
    for node in (g.nodes[i] for i in sorted(g.nodes)):
        head = f"{pad}%{node.id} = {node.kind}"
        if node.attrs:
            items = ", ".join(f"{k}={_fmt_attr(node.attrs[k])}" for k in sorted(node.attrs))
            head += f"[{items}]"
        head += "(" + ", ".join(_fmt_ref(n, p) for n, p in node.inputs) + ")"
        if node.control_deps:
            head += " ctrl[" + ", ".join(f"%{c}" for c in sorted(node.control_deps)) + "]"
        if node.block is not None:
            head += " {"
            lines.append(head)
            for sub in _SUB_ORDER[node.block.kind]:
                lines.append(f"{pad}  {sub} {{")
                _dump_graph(node.block.subgraphs[sub], indent + 2, lines)
                lines.append(f"{pad}  }}")
            lines.append(f"{pad}}}")
        else:
            lines.append(head)
    if g.outputs:
        lines.append(f"{pad}outputs(" + ", ".join(_fmt_ref(n, p) for n, p in g.outputs) + ")")


def dumps(g: Graph) -> str:
    lines: list = []
    _dump_graph(g, 0, lines)
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# reading


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?(?:\d+\.\d*(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\.\d+(?:[eE][+-]?\d+)?|\d+))
  | (?P<ident>-?[A-Za-z_][A-Za-z_0-9]*)
  | (?P<sym>[%=\[\](){},:?])
""", re.VERBOSE)


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(text: str) -> list:
    toks = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind == "nl":
            line += 1
            col = 1
        else:
            if kind not in ("ws", "comment"):
                toks.append(_Token(kind, tok, line, col))
            col += len(tok)
        pos = m.end()
    toks.append(_Token("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def peek(self) -> _Token:
        return self.toks[self.pos]

    def next(self) -> _Token:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def fail(self, msg: str):
        t = self.peek()
        raise ParseError(f"{msg} (got {t.text!r})", t.line, t.col)

    def expect(self, text: str) -> _Token:
        t = self.next()
        if t.text != text:
            raise ParseError(f"expected {text!r}, got {t.text!r}", t.line, t.col)
        return t

    def at(self, text: str) -> bool:
        return self.peek().text == text

    # -- leaf values -------------------------------------------------------

    def parse_int(self) -> int:
        t = self.next()
        try:
            return int(t.text)
        except ValueError:
            raise ParseError(f"expected integer, got {t.text!r}", t.line, t.col)

    def parse_float(self) -> float:
        t = self.next()
        if t.text in ("inf", "-inf", "nan"):
            return float(t.text)
        try:
            return float(t.text)
        except ValueError:
            raise ParseError(f"expected number, got {t.text!r}", t.line, t.col)

    def parse_string(self) -> str:
        t = self.next()
        if t.kind != "string":
            raise ParseError(f"expected string, got {t.text!r}", t.line, t.col)
        body = t.text[1:-1]
        return body.replace('\\"', '"').replace("\\\\", "\\")

    def parse_shape(self):
        if self.at("none"):
            self.next()
            return None
        self.expect("[")
        dims = []
        while not self.at("]"):
            if self.at("?"):
                self.next()
                dims.append(None)
            else:
                dims.append(self.parse_int())
            if not self.at("]"):
                self.expect(",")
        self.expect("]")
        return tuple(dims)

    def parse_tensor(self) -> TensorValue:
        t = self.next()
        dtype = DType(t.text)
        self.expect("[")
        dims = []
        while not self.at("]"):
            dims.append(self.parse_int())
            if not self.at("]"):
                self.expect(",")
        self.expect("]")
        self.expect("{")
        items = []
        while not self.at("}"):
            if dtype == DType.F64:
                items.append(self.parse_float())
            elif dtype == DType.I64:
                items.append(self.parse_int())
            else:
                w = self.next()
                if w.text not in ("true", "false"):
                    raise ParseError(f"expected bool, got {w.text!r}", w.line, w.col)
                items.append(w.text == "true")
            if not self.at("}"):
                self.expect(",")
        self.expect("}")
        arr = np.array(items, dtype=dtype.np_dtype).reshape(tuple(dims))
        return TensorValue(dtype, arr)

    def parse_attr_value(self):
        t = self.peek()
        if t.kind == "string":
            return self.parse_string()
        if t.text in ("f64", "i64", "bool"):
            if self.toks[self.pos + 1].text == "[":
                return self.parse_tensor()
            self.next()
            return DType(t.text)
        if t.text in ("true", "false"):
            self.next()
            return t.text == "true"
        if t.text == "none":
            self.next()
            return None
        if t.text == "[":
            return self.parse_shape()
        if t.kind == "number":
            if "." in t.text or "e" in t.text or "E" in t.text:
                return self.parse_float()
            return self.parse_int()
        self.fail("expected attribute value")

    # -- structure ---------------------------------------------------------

    def parse_ref(self, idmap) -> tuple:
        self.expect("%")
        t = self.next()
        try:
            pid = int(t.text)
        except ValueError:
            raise ParseError(f"expected node id, got {t.text!r}", t.line, t.col)
        port = 0
        if self.at(":"):
            self.next()
            port = self.parse_int()
        if pid not in idmap:
            raise ParseError(f"reference to undefined node %{pid}", t.line, t.col)
        return (idmap[pid], port)

    def parse_graph(self, g: Graph):
        idmap: dict = {}
        while True:
            t = self.peek()
            if t.text == "var":
                self.next()
                name = self.next().text
                self.expect("=")
                g.declare_variable(name, self.parse_tensor())
            elif t.text == "%":
                self.next()
                pid_tok = self.next()
                pid = int(pid_tok.text)
                self.expect("=")
                kind = self.next().text
                attrs = {}
                if self.at("["):
                    self.next()
                    while not self.at("]"):
                        key = self.next().text
                        self.expect("=")
                        attrs[key] = self.parse_attr_value()
                        if not self.at("]"):
                            self.expect(",")
                    self.expect("]")
                self.expect("(")
                inputs = []
                while not self.at(")"):
                    inputs.append(self.parse_ref(idmap))
                    if not self.at(")"):
                        self.expect(",")
                self.expect(")")
                ctrl = []
                if self.at("ctrl"):
                    self.next()
                    self.expect("[")
                    while not self.at("]"):
                        ctrl.append(self.parse_ref(idmap)[0])
                        if not self.at("]"):
                            self.expect(",")
                    self.expect("]")
                block = None
                if self.at("{"):
                    self.next()
                    subs = {}
                    while not self.at("}"):
                        name = self.next().text
                        self.expect("{")
                        sub = Graph()
                        sub.outer_variables = {**g.outer_variables, **g.variables}
                        self.parse_graph(sub)
                        self.expect("}")
                        subs[name] = sub
                    self.expect("}")
                    if kind not in _SUB_ORDER:
                        raise ParseError(f"kind {kind!r} does not take a block",
                                         pid_tok.line, pid_tok.col)
                    if kind == "parfor":
                        block = Block("parfor", subs, out_arity=len(subs["body"].outputs))
                    elif kind == "cond":
                        block = Block("cond", subs, out_arity=len(subs["then"].outputs))
                    else:
                        block = Block("while", subs, num_carried=len(subs["body"].outputs))
                refs = [Ref(g, n, p) for n, p in inputs]
                node = g.add_node(kind, refs, attrs, control_deps=ctrl, block=block)
                idmap[pid] = node.id
            elif t.text == "outputs":
                self.next()
                self.expect("(")
                outs = []
                while not self.at(")"):
                    outs.append(self.parse_ref(idmap))
                    if not self.at(")"):
                        self.expect(",")
                self.expect(")")
                g.set_outputs([Ref(g, n, p) for n, p in outs])
                return
            else:
                return


def loads(text: str) -> Graph:
    p = _Parser(_tokenize(text))
    g = Graph()
    p.parse_graph(g)
    t = p.peek()
    if t.kind != "eof":
        raise ParseError(f"trailing input {t.text!r}", t.line, t.col)
    return g


def dump(g: Graph, path):
    with open(path, "w") as fh:
        fh.write(dumps(g))


def load(path) -> Graph:
    with open(path) as fh:
        return loads(fh.read())
