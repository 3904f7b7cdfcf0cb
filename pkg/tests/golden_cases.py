"""Messages frozen in tests/golden/wire, one document per message type."""

from bubblecodes.model import BubbleSpec, BubblesMap, ContextVariable, MapEntry, UnusedNode
from bubblecodes.wire import (
    AppData,
    BubbleTransfer,
    ContextInfo,
    MapUpdate,
    Message,
    PermissionReply,
    PermissionRequest,
    QualificationReply,
    QualificationRequest,
    RetractCommand,
    StatusHeartbeat,
    SwitchNotice,
    TaskCompletion,
)

LIVING_MAP = BubblesMap(
    "vp",
    6,
    (
        MapEntry("video", "tv"),
        MapEntry("audio", "hifi1"),
        MapEntry("control", "phone"),
    ),
    (UnusedNode("hifi2", frozenset({"audio"}), 3),),
)

SWITCHED_MAP = BubblesMap(
    "vp",
    6,
    (
        MapEntry("video", "tv"),
        MapEntry("audio", "hifi2"),
        MapEntry("control", "phone"),
    ),
)

GOLDEN = {
    "bubbles_map": Message(12, "phone", "tv", "vp", MapUpdate(LIVING_MAP)),
    "context_info": Message(3, "phone", "tv", "vp", ContextInfo(ContextVariable("location", "living room", 2))),
    "app_data": Message(1, "phone", "tv", "vp", AppData("video", b"pause")),
    "permission_request": Message(
        2, "phone", "tv", "vp", PermissionRequest("video", frozenset({"display"}), "alice", 5)
    ),
    "permission_reply": Message(2, "tv", "phone", "vp", PermissionReply("video", True, "granted")),
    "qualification_request": Message(
        1, "phone", "tv", "vp", QualificationRequest(frozenset({"display", "audio", "input"}))
    ),
    "qualification_reply": Message(1, "tv", "phone", "vp", QualificationReply(frozenset({"display"}))),
    "task_completion": Message(7, "hifi1", "phone", "vp", TaskCompletion("audio")),
    "bubble_transfer": Message(
        3,
        "phone",
        "tv",
        "vp",
        BubbleTransfer(BubbleSpec("video", frozenset({"display"}), "player", "push"), LIVING_MAP, 22401),
    ),
    "retract_command": Message(9, "phone", "tv", "vp", RetractCommand("video", "preempted")),
    "status_heartbeat": Message(21, "hifi1", "phone", "vp", StatusHeartbeat(("audio",), 24409, 6)),
    "switch_notice": Message(
        14, "hifi1", "phone", "vp", SwitchNotice("audio", "hifi1", "hifi2", SWITCHED_MAP)
    ),
}
