# Interpreter child for the local sandbox backend.
#
# Frames on both pipes: 4-byte big-endian length, then UTF-8 JSON.
#   in:  {"type": "exec", "id": str, "code": str} | {"type": "interrupt"}
#   out: {"type": "stdout"|"stderr", "id", "text"}
#        {"type": "rich", "id", "mime", "text"?, "payload_path"?}
#        {"type": "error", "id", "ename", "evalue", "traceback": [str]}
#        {"type": "done", "id"}
#        {"type": "ready"}
import ast
import json
import os
import queue
import re
import signal
import struct
import subprocess
import sys
import threading
import traceback

_ADDR = re.compile(r" at 0x[0-9a-fA-F]+")

_in = os.fdopen(os.dup(0), "rb", buffering=0)
_out = os.fdopen(os.dup(1), "wb", buffering=0)
_devnull = os.open(os.devnull, os.O_RDWR)
os.dup2(_devnull, 0)
os.dup2(_devnull, 1)
os.dup2(_devnull, 2)

_write_lock = threading.Lock()
_requests = queue.Queue()
_busy = threading.Event()
_allow_shell = os.environ.get("CELLFLOW_ALLOW_SHELL") == "1"


def _send(frame):
    data = json.dumps(frame).encode("utf-8")
    with _write_lock:
        _out.write(struct.pack(">I", len(data)) + data)


def _read_exact(n):
    buf = b""
    while len(buf) < n:
        chunk = _in.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _reader():
    while True:
        head = _read_exact(4)
        if head is None:
            _requests.put(None)
            return
        body = _read_exact(struct.unpack(">I", head)[0])
        if body is None:
            _requests.put(None)
            return
        frame = json.loads(body.decode("utf-8"))
        if frame.get("type") == "interrupt":
            if _busy.is_set():
                os.kill(os.getpid(), signal.SIGINT)
        else:
            _requests.put(frame)


class _Stream:
    def __init__(self, kind):
        self.kind = kind
        self.cell = None

    def write(self, text):
        if text:
            _send({"type": self.kind, "id": self.cell, "text": str(text)})
        return len(text)

    def flush(self):
        pass

    def isatty(self):
        return False

    @property
    def encoding(self):
        return "utf-8"


_stdout = _Stream("stdout")
_stderr = _Stream("stderr")
sys.stdout = _stdout
sys.stderr = _stderr

_namespace = {"__name__": "__main__", "__builtins__": __builtins__}


class ShellError(Exception):
    pass


def _shell(cmd):
    if not _allow_shell:
        raise ShellError("shell escapes are disabled in this sandbox: " + cmd)
    proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
    if proc.stdout:
        sys.stdout.write(proc.stdout)
    if proc.stderr:
        sys.stderr.write(proc.stderr)
    if proc.returncode != 0:
        raise ShellError("command exited with status %d: %s" % (proc.returncode, cmd))


_namespace["__cellflow_shell__"] = _shell


def _rewrite_shell(code):
    lines = []
    for line in code.split("\n"):
        stripped = line.lstrip()
        if stripped.startswith("!"):
            indent = line[: len(line) - len(stripped)]
            line = indent + "__cellflow_shell__(" + repr(stripped[1:]) + ")"
        lines.append(line)
    return "\n".join(lines)


def _flush_figures(cell_id):
    plt = sys.modules.get("matplotlib.pyplot")
    if plt is None:
        return
    nums = plt.get_fignums()
    if not nums:
        return
    os.makedirs("outputs", exist_ok=True)
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in cell_id)
    for n, num in enumerate(nums, start=1):
        rel = "outputs/%s_%d.png" % (safe, n)
        plt.figure(num).savefig(rel, format="png")
        _send({"type": "rich", "id": cell_id, "mime": "image/png", "payload_path": rel})
    plt.close("all")


def _run(cell_id, code):
    filename = "<cell %s>" % cell_id
    tree = ast.parse(_rewrite_shell(code), filename=filename, mode="exec")
    last = None
    if tree.body and isinstance(tree.body[-1], ast.Expr):
        last = ast.Expression(tree.body.pop().value)
    exec(compile(tree, filename, "exec"), _namespace)
    if last is not None:
        value = eval(compile(last, filename, "eval"), _namespace)
        if value is not None:
            _send({"type": "rich", "id": cell_id, "mime": "text/plain", "text": _ADDR.sub(" at 0x?", repr(value))})
    _flush_figures(cell_id)


def _user_frames(tb):
    frames = traceback.extract_tb(tb)
    kept = [f for f in frames if f.filename.startswith("<cell ")]
    return traceback.format_list(kept) if kept else traceback.format_list(frames)


def _report(cell_id, exc, name=None):
    lines = ["Traceback (most recent call last):\n"] + _user_frames(exc.__traceback__)
    lines += traceback.format_exception_only(type(exc), exc)
    _send({
        "type": "error",
        "id": cell_id,
        "ename": name or type(exc).__name__,
        "evalue": str(exc),
        "traceback": [l.rstrip("\n") for l in lines],
    })


def main():
    threading.Thread(target=_reader, daemon=True).start()
    _send({"type": "ready"})
    while True:
        frame = _requests.get()
        if frame is None:
            return
        if frame.get("type") != "exec":
            continue
        cell_id = frame.get("id", "")
        _stdout.cell = _stderr.cell = cell_id
        _busy.set()
        try:
            _run(cell_id, frame.get("code", ""))
        except KeyboardInterrupt as exc:
            _report(cell_id, exc, "Interrupted")
        except BaseException as exc:
            _report(cell_id, exc)
        finally:
            _busy.clear()
        try:
            _flush_figures(cell_id)
        except BaseException:
            pass
        _send({"type": "done", "id": cell_id})


if __name__ == "__main__":
    main()
