"""
外部模型客户端
通过WebSocket上的JSON消息与模型服务通信：握手校验词表，逐步请求下一个token的对数概率
"""

import json
import math
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, TypeAdapter, ValidationError, model_validator
from websockets.exceptions import ConnectionClosed, InvalidHandshake, InvalidURI
from websockets.sync.client import ClientConnection, connect

from app.core.config import settings
from app.core.exceptions import ModelConnectionError, ModelError, ProtocolError, VocabMismatchError
from app.services.language_model import LanguageModel


# ==================== 协议消息 ====================

class HelloMessage(BaseModel):
    """握手消息（双方各发送一次）"""
    type: Literal["hello"] = "hello"
    vocab_size: int
    tokenizer_id: Optional[str] = None
    model_id: Optional[str] = None


class NextRequest(BaseModel):
    """请求下一个token的分布"""
    type: Literal["next"] = "next"
    id: int
    prefix: List[int]
    top_j: Optional[int] = None


class LogProbsResponse(BaseModel):
    """对数概率响应：dense为完整向量，sparse为 [[id, score], ...]"""
    type: Literal["logprobs"] = "logprobs"
    id: int
    dense: Optional[List[float]] = None
    sparse: Optional[List[Tuple[int, float]]] = None

    @model_validator(mode="after")
    def _one_payload(self) -> "LogProbsResponse":
        if (self.dense is None) == (self.sparse is None):
            raise ValueError("dense与sparse必须且只能给出一个")
        return self


class ErrorMessage(BaseModel):
    """错误消息"""
    type: Literal["error"] = "error"
    id: Optional[int] = None
    message: str


WireMessage = Annotated[
    Union[HelloMessage, NextRequest, LogProbsResponse, ErrorMessage],
    Field(discriminator="type"),
]
_message_adapter = TypeAdapter(WireMessage)


def encode_message(message: BaseModel) -> str:
    """序列化消息（保留 -Infinity）"""
    return json.dumps(message.model_dump(exclude_none=True))


def parse_message(raw: Union[str, bytes]) -> BaseModel:
    """解析消息，格式不符时抛出ProtocolError"""
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolError(f"消息不是合法JSON: {e}") from e
    try:
        return _message_adapter.validate_python(data)
    except ValidationError as e:
        raise ProtocolError(f"消息格式错误: {e}") from e


# ==================== 远程模型 ====================

class RemoteLanguageModel(LanguageModel):
    """转发到外部模型服务的语言模型代理（单连接，按顺序调用）"""

    def __init__(self,
                 connection: ClientConnection,
                 vocab_size: int,
                 model_id: str = "remote",
                 timeout: Optional[float] = None,
                 top_j: Optional[int] = None):
        self._connection = connection
        self._vocab_size = vocab_size
        self.model_id = model_id
        self.timeout = timeout
        self.top_j = top_j
        self._next_id = 0

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def _to_vector(self, response: LogProbsResponse) -> np.ndarray:
        if response.dense is not None:
            if len(response.dense) != self._vocab_size:
                raise ProtocolError(f"dense向量长度 {len(response.dense)} 与词表大小 {self._vocab_size} 不一致")
            return np.asarray(response.dense, dtype=np.float64)

        # 稀疏响应中缺失的id按 -inf 处理
        vector = np.full(self._vocab_size, -math.inf)
        for token, score in response.sparse:
            if not 0 <= token < self._vocab_size:
                raise ProtocolError(f"sparse中的token id {token} 超出词表范围")
            vector[token] = score
        return vector

    def next_log_probs(self, prefix) -> np.ndarray:
        self._next_id += 1
        request = NextRequest(id=self._next_id, prefix=[int(token) for token in prefix], top_j=self.top_j)
        try:
            self._connection.send(encode_message(request))
            raw = self._connection.recv(timeout=self.timeout)
        except (ConnectionClosed, OSError, TimeoutError) as e:
            raise ModelConnectionError(f"模型服务通信失败: {e}") from e

        message = parse_message(raw)
        if isinstance(message, ErrorMessage):
            raise ModelError(f"模型服务返回错误: {message.message}")
        if not isinstance(message, LogProbsResponse):
            raise ProtocolError(f"期望logprobs消息，收到 {message.type}")
        if message.id != request.id:
            raise ProtocolError(f"响应id {message.id} 与请求id {request.id} 不匹配")
        return self._to_vector(message)

    def close(self) -> None:
        self._connection.close()


def external_model_connect(endpoint: str,
                           vocab_size: int,
                           tokenizer_id: Optional[str] = None,
                           timeout: Optional[float] = None,
                           top_j: Optional[int] = None) -> RemoteLanguageModel:
    """连接外部模型服务并完成握手"""
    timeout = timeout if timeout is not None else settings.MODEL_CONNECT_TIMEOUT
    try:
        connection = connect(endpoint, open_timeout=timeout, max_size=None)
    except (OSError, InvalidURI, InvalidHandshake, TimeoutError) as e:
        raise ModelConnectionError(f"无法连接模型服务 {endpoint}: {e}") from e

    try:
        connection.send(encode_message(HelloMessage(vocab_size=vocab_size, tokenizer_id=tokenizer_id)))
        reply = parse_message(connection.recv(timeout=timeout))
        if isinstance(reply, ErrorMessage):
            raise ModelConnectionError(f"模型服务拒绝握手: {reply.message}")
        if not isinstance(reply, HelloMessage):
            raise ProtocolError(f"握手期望hello消息，收到 {reply.type}")
        if reply.vocab_size != vocab_size:
            raise VocabMismatchError(f"模型词表大小 {reply.vocab_size} 与分词器 {vocab_size} 不一致")
        if reply.tokenizer_id and tokenizer_id and reply.tokenizer_id != tokenizer_id:
            raise VocabMismatchError(f"模型分词器 {reply.tokenizer_id} 与本地分词器 {tokenizer_id} 不一致")
    except (ConnectionClosed, OSError, TimeoutError) as e:
        connection.close()
        raise ModelConnectionError(f"模型服务握手失败 {endpoint}: {e}") from e
    except ModelError:
        connection.close()
        raise

    logger.info(f"已连接模型服务: {endpoint}, 模型={reply.model_id or 'remote'}, |V|={vocab_size}")
    return RemoteLanguageModel(connection, vocab_size, model_id=reply.model_id or "remote",
                               timeout=timeout, top_j=top_j)
