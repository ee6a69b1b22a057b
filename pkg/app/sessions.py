import uuid
from collections import OrderedDict
from typing import Optional

from .composite import Mode

# oldest sessions are evicted past this many live entries
MAX_SESSIONS = 10_000

# one combined-policy mode per session (one episode per session), least recently used first
_store: "OrderedDict[str, Mode]" = OrderedDict()


def ensure_session(session_id: Optional[str]) -> str:
    sid = session_id or str(uuid.uuid4())
    _store.setdefault(sid, Mode.TASK)
    _store.move_to_end(sid)
    while len(_store) > MAX_SESSIONS:
        _store.popitem(last=False)
    return sid


def get_mode(session_id: str) -> Mode:
    return _store.get(session_id, Mode.TASK)


def set_mode(session_id: str, mode: Mode) -> None:
    _store[session_id] = mode


def reset_session(session_id: str) -> None:
    # entry is recreated in task mode on the next /act
    _store.pop(session_id, None)


def session_count() -> int:
    return len(_store)


def clear() -> None:
    _store.clear()
