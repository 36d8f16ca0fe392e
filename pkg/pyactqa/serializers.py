"""
Module for the binary checkpoint serializers.

A checkpoint is an ordered map of named float64 tensors, written as

    b"MILNET1\\0" | u32 count | count x (u32 name length | UTF-8 name | u8 rank | u32 dims... | f64 payload) | u32 crc

All integers and floats are little-endian. The trailing CRC32 covers the tensor payload bytes in entry order.
"""
import struct
import zlib
from collections import OrderedDict

import numpy as np

from pyactqa.exceptions import SerializerException

MAGIC = b"MILNET1\0"

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")


class Checkpoint(OrderedDict):
    """
    Ordered name -> tensor map
    """


def _read_exact(data, size: int, what: str) -> bytes:
    chunk = data.read(size)
    if len(chunk) != size:
        raise SerializerException(f"Truncated checkpoint while reading {what}", what)
    return chunk


def tensor_payload(tensor: np.ndarray) -> bytes:
    return np.ascontiguousarray(tensor, dtype="<f8").tobytes()


class Serializer:
    """
    Base Serializer class
    """
    def serialize(self, loader, obj, **kwargs) -> bytes:
        """
        Attempt to serialize an object

        :param loader: The loader that invoked the method
        :param obj: The object to serialize
        :param **kwargs: Additional arguments to be passed to serialize

        :rtype: Serialized version of :obj:
        """
        raise NotImplementedError

    def deserialize(self, loader, cls, data, **kwargs):
        """
        Attempt to deserialize an object

        :param loader: The loader that invoked the method
        :param cls: The type to deserialize to
        :param data: Binary stream to read from
        :param **kwargs: Additional arguments to be passed to deserialize

        :rtype: Instance of :cls: deserialized from :data:
        """
        raise NotImplementedError


class UInt32Serializer(Serializer):
    """
    Unsigned 32-bit little-endian integer
    """
    def serialize(self, loader, obj, **kwargs):
        if not 0 <= obj < 2 ** 32:
            raise SerializerException(f"{obj} does not fit in u32", obj)
        return _U32.pack(obj)

    def deserialize(self, loader, cls, data, **kwargs):
        return _U32.unpack(_read_exact(data, 4, "u32"))[0]


class StringSerializer(Serializer):
    """
    u32 byte length followed by UTF-8 bytes
    """
    def serialize(self, loader, obj, **kwargs):
        raw = obj.encode("UTF-8")
        return loader.serialize(len(raw)) + raw

    def deserialize(self, loader, cls, data, **kwargs):
        length = loader.deserialize(data, int)
        try:
            return _read_exact(data, length, "name").decode("UTF-8")
        except UnicodeDecodeError as error:
            raise SerializerException("Tensor name is not valid UTF-8", error) from error


class TensorSerializer(Serializer):
    """
    u8 rank, u32 per dimension, then the row-major float64 payload
    """
    def serialize(self, loader, obj, **kwargs):
        obj = np.asarray(obj, dtype=np.float64)
        if not 1 <= obj.ndim <= 255 or 0 in obj.shape:
            raise SerializerException(f"Cannot store a tensor of shape {obj.shape}", obj.shape)

        header = _U8.pack(obj.ndim) + b"".join(loader.serialize(int(d)) for d in obj.shape)
        return header + tensor_payload(obj)

    def deserialize(self, loader, cls, data, **kwargs):
        rank = _U8.unpack(_read_exact(data, 1, "rank"))[0]
        dims = tuple(loader.deserialize(data, int) for _ in range(rank))
        if rank == 0 or 0 in dims:
            raise SerializerException(f"Invalid tensor dims {dims}", dims)

        count = int(np.prod(dims))
        payload = _read_exact(data, 8 * count, "payload")
        return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


class CheckpointSerializer(Serializer):
    """
    Named tensor map with magic header and trailing CRC32
    """
    def serialize(self, loader, obj, **kwargs):
        buffer = MAGIC + loader.serialize(len(obj))
        crc = 0

        for name, value in obj.items():
            buffer += loader.serialize(str(name))
            buffer += loader.serialize(np.asarray(value, dtype=np.float64))
            crc = zlib.crc32(tensor_payload(value), crc)

        return buffer + _U32.pack(crc & 0xFFFFFFFF)

    def deserialize(self, loader, cls, data, **kwargs):
        if _read_exact(data, len(MAGIC), "magic") != MAGIC:
            raise SerializerException("Not a checkpoint: bad magic bytes", MAGIC)

        count = loader.deserialize(data, int)
        checkpoint = Checkpoint()
        crc = 0

        for _ in range(count):
            name = loader.deserialize(data, str)
            if name in checkpoint:
                raise SerializerException(f"Duplicate tensor name {name}", name)
            value = loader.deserialize(data, np.ndarray)
            crc = zlib.crc32(tensor_payload(value), crc)
            checkpoint[name] = value

        stored = _U32.unpack(_read_exact(data, 4, "crc"))[0]
        if stored != crc & 0xFFFFFFFF:
            raise SerializerException(f"CRC mismatch: stored {stored:#010x}, computed {crc & 0xFFFFFFFF:#010x}",
                                      stored)
        if data.read(1):
            raise SerializerException("Trailing bytes after checkpoint", count)

        return checkpoint
