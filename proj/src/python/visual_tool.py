import json as _cf_json
import os as _cf_os
import urllib.error as _cf_urlerror
import urllib.request as _cf_request


def evaluate_image(image_path, requirements, query):
    """Ask a vision model whether the image at image_path meets requirements."""
    bridge = _cf_os.environ.get("CELLFLOW_TOOL_BRIDGE")
    if not bridge:
        raise RuntimeError("evaluate_image is not connected to the engine")
    body = _cf_json.dumps({
        "image_path": _cf_os.path.abspath(str(image_path)),
        "requirements": str(requirements),
        "query": str(query),
    }).encode("utf-8")
    req = _cf_request.Request(bridge + "/evaluate_image", data=body,
                              headers={"Content-Type": "application/json"})
    try:
        with _cf_request.urlopen(req, timeout=600) as resp:
            reply = _cf_json.loads(resp.read().decode("utf-8"))
    except _cf_urlerror.HTTPError as err:
        detail = _cf_json.loads(err.read().decode("utf-8") or "{}")
        kind = detail.get("error", "ModelCallFailed")
        message = detail.get("message", str(err))
        if kind == "InvalidImagePath":
            raise FileNotFoundError(message) from None
        if kind == "EmptyArgument":
            raise ValueError(message) from None
        raise RuntimeError(message) from None
    return reply["text"]
