from __future__ import annotations

from typing import Any

import orjson

from peft_fusion.serializers.base import BaseSerializer


class ORJSONSerializer(BaseSerializer):
    """Serializer backed by orjson for speed; numpy arrays serialize natively."""

    option = orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY

    def dumps(self, data: Any) -> bytes:
        return orjson.dumps(data, option=self.option)

    def loads(self, data: bytes | str) -> Any:
        return orjson.loads(data)
