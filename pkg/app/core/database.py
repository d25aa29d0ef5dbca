"""
检索数据库文件管理模块
负责检索数据库的二进制文件读写（版本化头部 + 路径表 + varint token数组 + 可选向量块 + CRC32）

文件布局（整数均为小端）：
    magic            4字节  b"RCDB"
    format_version   u16
    m                u32
    tokenizer_id     varint长度 + UTF-8
    record_count     u32
    path_count       u32
    path_table       path_count × (varint长度 + UTF-8)
    records          record_count × (path_index, chunk_index, key_len, key..., cont_len, cont...)，全部为varint
    has_embeddings   u8
    [dimension u32, record_count × dimension × float32 行优先]
    crc32            u32，覆盖之前的全部字节
"""

import os
import struct
import zlib
from pathlib import Path
from typing import List, Union, Dict

import numpy as np
from loguru import logger

from app.core.exceptions import DatabaseFormatError
from app.models.chunk import ChunkRecord, RetrievalDatabase

MAGIC = b"RCDB"
FORMAT_VERSION = 1


def encode_varint(value: int) -> bytes:
    """无符号LEB128编码"""
    if value < 0:
        raise ValueError(f"varint不支持负数: {value}")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


class _Reader:
    """带越界检查的字节读取器"""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise DatabaseFormatError(f"数据库文件被截断: 偏移 {self.offset} 处需要 {size} 字节")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.read(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def varint(self) -> int:
        result = 0
        shift = 0
        while True:
            if shift > 63:
                raise DatabaseFormatError(f"varint过长: 偏移 {self.offset}")
            byte = self.read(1)[0]
            result |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return result
            shift += 7

    def string(self) -> str:
        raw = self.read(self.varint())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DatabaseFormatError(f"字符串不是UTF-8编码: 偏移 {self.offset}") from e


class DatabaseManager:
    """检索数据库文件管理器"""

    def serialize(self, db: RetrievalDatabase) -> bytes:
        """序列化为字节串"""
        out = bytearray()
        out += MAGIC
        out += struct.pack("<HI", FORMAT_VERSION, db.m)
        tokenizer_id = db.tokenizer_id.encode("utf-8")
        out += encode_varint(len(tokenizer_id)) + tokenizer_id
        out += struct.pack("<I", len(db))

        # 路径表间接引用，避免每条记录重复存路径
        paths = db.files
        path_index: Dict[str, int] = {path: idx for idx, path in enumerate(paths)}
        out += struct.pack("<I", len(paths))
        for path in paths:
            raw = path.encode("utf-8")
            out += encode_varint(len(raw)) + raw

        for record in db.records:
            out += encode_varint(path_index[record.file_path])
            out += encode_varint(record.chunk_index)
            out += encode_varint(len(record.key_tokens))
            out += b"".join(encode_varint(token) for token in record.key_tokens)
            out += encode_varint(len(record.continuation_tokens))
            out += b"".join(encode_varint(token) for token in record.continuation_tokens)

        if db.has_embeddings:
            out += struct.pack("<BI", 1, db.embeddings.shape[1])
            out += np.ascontiguousarray(db.embeddings, dtype="<f4").tobytes()
        else:
            out += struct.pack("<B", 0)

        out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
        return bytes(out)

    def deserialize(self, data: bytes) -> RetrievalDatabase:
        """从字节串解析，任何错误都不返回部分数据库"""
        if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
            raise DatabaseFormatError("不是检索数据库文件（magic不匹配）")
        body, checksum = data[:-4], struct.unpack("<I", data[-4:])[0]
        if zlib.crc32(body) & 0xFFFFFFFF != checksum:
            raise DatabaseFormatError("数据库文件校验和不一致，文件可能已损坏")

        reader = _Reader(body)
        reader.read(len(MAGIC))
        version, m = reader.unpack("<HI")
        if version != FORMAT_VERSION:
            raise DatabaseFormatError(f"数据库格式版本不匹配: 文件={version}, 支持={FORMAT_VERSION}")
        tokenizer_id = reader.string()
        record_count = reader.unpack("<I")

        path_count = reader.unpack("<I")
        paths = [reader.string() for _ in range(path_count)]

        records: List[ChunkRecord] = []
        for _ in range(record_count):
            path_idx = reader.varint()
            if path_idx >= path_count:
                raise DatabaseFormatError(f"路径下标越界: {path_idx} >= {path_count}")
            chunk_index = reader.varint()
            key = tuple(reader.varint() for _ in range(reader.varint()))
            continuation = tuple(reader.varint() for _ in range(reader.varint()))
            if not key:
                raise DatabaseFormatError(f"空的key块: {paths[path_idx]}#{chunk_index}")
            records.append(ChunkRecord(key_tokens=key, continuation_tokens=continuation,
                                       file_path=paths[path_idx], chunk_index=chunk_index))

        embeddings = None
        if reader.unpack("<B"):
            dimension = reader.unpack("<I")
            raw = reader.read(record_count * dimension * 4)
            embeddings = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(record_count, dimension)

        if reader.offset != len(body):
            raise DatabaseFormatError(f"数据库文件末尾有多余数据: {len(body) - reader.offset} 字节")

        try:
            return RetrievalDatabase(records, m=m, tokenizer_id=tokenizer_id, embeddings=embeddings)
        except ValueError as e:
            raise DatabaseFormatError(f"数据库内容无效: {e}") from e

    def save_database(self, db: RetrievalDatabase, path: Union[str, Path]) -> int:
        """保存数据库，返回文件字节数"""
        path = Path(path)
        # 确保目录存在
        if not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            logger.info(f"创建数据库目录: {path.parent}")

        data = self.serialize(db)
        tmp_path = path.with_name(path.name + ".tmp")
        tmp_path.write_bytes(data)
        os.replace(tmp_path, path)
        logger.info(f"保存检索数据库: {path}, 记录={len(db)}, 大小={len(data)}字节")
        return len(data)

    def load_database(self, path: Union[str, Path]) -> RetrievalDatabase:
        """加载数据库"""
        path = Path(path)
        if not path.exists():
            raise DatabaseFormatError(f"数据库文件不存在: {path}")
        db = self.deserialize(path.read_bytes())
        logger.info(f"加载检索数据库: {path}, 记录={len(db)}, m={db.m}, 分词器={db.tokenizer_id}")
        return db


# 创建全局数据库管理器实例
db_manager = DatabaseManager()


def save_database(db: RetrievalDatabase, path: Union[str, Path]) -> int:
    """保存检索数据库"""
    return db_manager.save_database(db, path)


def load_database(path: Union[str, Path]) -> RetrievalDatabase:
    """加载检索数据库"""
    return db_manager.load_database(path)
