"""Fakes shared by the diagnosis tests."""
import threading

from apps.diagnosis.exceptions import BackendError
from apps.diagnosis.gateway import BackendConfig, Gateway


class ScriptedGateway(Gateway):
    """Gateway whose replies are queued per template name; the last one
    repeats. Exceptions in the queue are raised. Parsing, re-asking and
    flags run through the real Gateway.ask."""

    def __init__(self, replies=None, config=None):
        super().__init__(config or BackendConfig(), templates={})
        self.replies = {name: list(items) for name, items in (replies or {}).items()}
        self.calls = []
        self._queue_lock = threading.Lock()

    def call(self, name, variables, reminder=None):
        with self._queue_lock:
            self.calls.append((name, dict(variables), reminder))
            queue = self.replies.get(name)
            if not queue:
                reply = BackendError("No scripted reply for %(name)s", params={'name': name})
            else:
                reply = queue.pop(0) if len(queue) > 1 else queue[0]
        self._count('requests')
        if isinstance(reply, Exception):
            self._count('backend_failures')
            raise reply
        return reply

    def calls_to(self, name):
        return [call for call in self.calls if call[0] == name]
