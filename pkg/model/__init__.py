# Multi-task feature pyramid network
