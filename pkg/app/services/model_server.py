"""
模型服务
把任意LanguageModel通过WebSocket协议对外提供（用于serve-model命令和协议测试）
"""

import threading
from typing import Optional

import numpy as np
from loguru import logger
from websockets.exceptions import ConnectionClosed
from websockets.sync.server import ServerConnection, WebSocketServer, serve

from app.core.exceptions import ProtocolError
from app.services.language_model import LanguageModel
from app.services.model_client import (ErrorMessage, HelloMessage, LogProbsResponse, NextRequest,
                                       encode_message, parse_message)


class ModelServer:
    """模型服务器"""

    def __init__(self,
                 model: LanguageModel,
                 host: str = "127.0.0.1",
                 port: int = 8765,
                 tokenizer_id: Optional[str] = None,
                 top_j: Optional[int] = None):
        self.model = model
        self.host = host
        self.port = port
        self.tokenizer_id = tokenizer_id
        self.top_j = top_j
        self._server: Optional[WebSocketServer] = None
        self._thread: Optional[threading.Thread] = None

    def _respond(self, request: NextRequest):
        if any(not 0 <= token < self.model.vocab_size for token in request.prefix):
            return ErrorMessage(id=request.id, message="前缀中的token id超出词表范围")
        scores = np.asarray(self.model.next_log_probs(request.prefix), dtype=np.float64)
        top_j = request.top_j or self.top_j
        if not top_j:
            return LogProbsResponse(id=request.id, dense=scores.tolist())
        ids = np.arange(len(scores))
        best = np.lexsort((ids, -scores))[:top_j]
        return LogProbsResponse(id=request.id, sparse=[(int(i), float(scores[i])) for i in best])

    def handle(self, connection: ServerConnection) -> None:
        """处理一个客户端连接"""
        peer = connection.remote_address
        logger.info(f"模型客户端已连接: {peer}")
        try:
            for raw in connection:
                try:
                    message = parse_message(raw)
                except ProtocolError as e:
                    connection.send(encode_message(ErrorMessage(message=str(e))))
                    continue

                if isinstance(message, HelloMessage):
                    reply = HelloMessage(vocab_size=self.model.vocab_size, tokenizer_id=self.tokenizer_id,
                                         model_id=self.model.model_id)
                elif isinstance(message, NextRequest):
                    try:
                        reply = self._respond(message)
                    except Exception as e:
                        logger.error(f"模型计算失败: {e}")
                        reply = ErrorMessage(id=message.id, message=str(e))
                else:
                    reply = ErrorMessage(message=f"不支持的消息类型: {message.type}")
                connection.send(encode_message(reply))
        except ConnectionClosed:
            pass
        logger.info(f"模型客户端已断开: {peer}")

    def start(self) -> int:
        """在后台线程启动服务，返回实际监听端口"""
        self._server = serve(self.handle, self.host, self.port, max_size=None)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        logger.info(f"模型服务已启动: ws://{self.host}:{self.port}, 模型={self.model.model_id}")
        return self.port

    def serve_forever(self) -> None:
        """前台运行服务"""
        with serve(self.handle, self.host, self.port, max_size=None) as server:
            self._server = server
            logger.info(f"模型服务已启动: ws://{self.host}:{self.port}, 模型={self.model.model_id}")
            server.serve_forever()

    def stop(self) -> None:
        """停止服务"""
        if self._server:
            self._server.shutdown()
            self._server = None
        if self._thread:
            self._thread.join(timeout=5)
            self._thread = None
        logger.info("模型服务已停止")

    @property
    def endpoint(self) -> str:
        return f"ws://{self.host}:{self.port}"
