import socket
import threading

import pytest

from bridge.config import BridgeConfig
from bridge.server import make_server


@pytest.fixture
def live_server():
    """A real guidance service on an ephemeral port; yields (base_url, model)."""
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    server = make_server(BridgeConfig(port=port))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{port}", server.RequestHandlerClass.model
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5)
