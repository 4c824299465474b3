from __future__ import annotations

import json
from typing import Any

from peft_fusion.serializers.base import BaseSerializer


class JSONSerializer(BaseSerializer):
    """Serializer using the standard library json module."""

    def __init__(self, encoding: str = "utf-8"):
        self.encoding = encoding

    def dumps(self, data: Any) -> bytes:
        text = json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return text.encode(self.encoding)

    def loads(self, data: bytes | str) -> Any:
        if isinstance(data, bytes):
            data = data.decode(self.encoding)
        return json.loads(data)
